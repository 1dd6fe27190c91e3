import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from appcessory.coupon import CouponKey  # noqa: E402
from appcessory.server import CashingServer  # noqa: E402

CRED = bytes(range(16))
OTHER_CRED = bytes(range(16, 32))


@pytest.fixture
def cred():
    return CRED


@pytest.fixture
def server():
    return CashingServer([CRED], pseudonym_key=b"k" * 16)


@pytest.fixture
def key():
    return CouponKey(bytes.fromhex("2b7e151628aed2a6abf7158809cf4f3c"))


_criteria: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "_criterion", None)
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker
    row = _criteria.setdefault(number, {"title": title, "ok": True, "detail": ""})
    row["ok"] = row["ok"] and report.passed
    row["detail"] = dict(report.user_properties).get("detail", row["detail"])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    m = item.get_closest_marker("criterion")
    if m is not None:
        outcome.get_result()._criterion = m.args


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        row = _criteria[n]
        line = f"criterion {n:>2} {'PASS' if row['ok'] else 'FAIL'}  {row['title']}"
        if row["detail"]:
            line += f"  [{row['detail']}]"
        terminalreporter.write_line(line)
