import os

import pytest

from appcessory.accessory import PerInterval
from appcessory.coupon import CouponKey, derive_coupon, derive_range
from appcessory.manager import CouponCashingManager, UnknownAuthor, external_counter
from appcessory.server import Accepted, Granted, GrantRecord, Refused, Rejected
from appcessory.wire import TransportError
from conftest import CRED, OTHER_CRED

KEY = CouponKey(b"\x01" * 16)


@pytest.fixture
def funded(server):
    server.register_batch([(c, 10_000, "acme", "heli-1", "heli") for c in derive_range(KEY, 0, 50)])
    return server


def test_deliver_and_user_report(funded):
    m = CouponCashingManager("m1", CRED, "u1", funded)
    coupons = derive_range(KEY, 0, 6)
    for i, c in enumerate(coupons):
        m.deliver(c, "heli-1", "alice" if i < 4 else "bob")
    m.deliver(coupons[0], "heli-1", "alice")  # replay is refused, tallies unchanged
    assert m.user_report() == [("alice", "heli-1", 40_000), ("bob", "heli-1", 20_000)]
    # recount from the server side
    for author, _, total in m.user_report():
        assert total == sum(e.credited for e in funded.ledger.values() if e.redeemer_author == author)


def test_bypass_rejected(funded):
    c = derive_coupon(KEY, 0)
    assert funded.redeem(c, "app", OTHER_CRED, "u") == Rejected("bad_credential")
    assert not funded.ledger[c].redeemed


class Flaky:
    """Drops the first ``fail`` calls after applying them, like a lost response."""

    def __init__(self, inner, fail):
        self.inner, self.fail = inner, fail

    def redeem(self, *a):
        res = self.inner.redeem(*a)
        if self.fail:
            self.fail -= 1
            raise TransportError("lost")
        return res


def test_retry_after_lost_response(funded):
    m = CouponCashingManager("m1", CRED, "u1", Flaky(funded, 1))
    c = derive_coupon(KEY, 0)
    # the first attempt landed, so the retry is refused and the coupon counted exactly once
    assert m.deliver(c, "heli-1", "alice") == Rejected("already_redeemed")
    assert funded.accounts["alice"].pending == 10_000
    m2 = CouponCashingManager("m1", CRED, "u1", Flaky(funded, 5), max_attempts=3)
    with pytest.raises(TransportError):
        m2.deliver(derive_coupon(KEY, 1), "heli-1", "alice")


def test_report_abuse_requires_tallied_author(funded):
    m = CouponCashingManager("m1", CRED, "u1", funded)
    with pytest.raises(UnknownAuthor):
        m.report_abuse("stranger")
    m.deliver(derive_coupon(KEY, 0), "heli-1", "mallory")
    res = m.report_abuse("mallory")
    assert res.suspended and res.clawed_back == 10_000


def minimal_setup(server, n=2):
    units = []
    for i in range(n):
        sid, key = os.urandom(16), CouponKey(os.urandom(16))
        coupons = derive_range(key, 0, 20)
        server.register_batch([(c, 1000, "acme", f"mini-{i}", "light") for c in coupons],
                              [GrantRecord(sid, key)])
        units.append((sid, coupons))
    return units


def test_drive_minimal_and_clone(server):
    (sid, coupons), = minimal_setup(server, 1)
    policy = PerInterval(60)
    uses = [(t, False) for t in range(0, 601, 60)]
    m = CouponCashingManager("m1", CRED, "u1", server)
    status, emitted = m.drive_minimal(sid, "mini-0", "acme", policy, 20, "alice", uses)
    assert isinstance(status, Granted)
    assert emitted == coupons[:10]
    assert external_counter(m, sid) == 10
    # second call on the same phone reuses the held key
    status, _ = m.drive_minimal(sid, "mini-0", "acme", policy, 20, "alice", [])
    assert status is None
    # a cloned id on another phone gets nothing
    clone = CouponCashingManager("m2", CRED, "u2", server)
    status, emitted = clone.drive_minimal(sid, "mini-0", "acme", policy, 20, "bob", uses)
    assert status == Refused("already_granted") and emitted == []
    assert external_counter(clone, sid) is None
    assert server.accounts["alice"].pending == 10_000 and "bob" not in server.accounts


def test_two_minimal_units_one_phone(server):
    units = minimal_setup(server, 2)
    m = CouponCashingManager("m1", CRED, "u1", server)
    uses = [(t, False) for t in range(0, 181, 60)]
    for i, (sid, coupons) in enumerate(units):
        status, emitted = m.drive_minimal(sid, f"mini-{i}", "acme", PerInterval(60), 20, "alice", uses)
        assert isinstance(status, Granted) and emitted == coupons[:3]
    assert [external_counter(m, sid) for sid, _ in units] == [3, 3]


def test_manager_record_round_trip(server):
    (sid, _), = minimal_setup(server, 1)
    m = CouponCashingManager("m1", CRED, "u1", server)
    m.drive_minimal(sid, "mini-0", "acme", PerInterval(60), 20, "alice", [(0, False), (120, False)])
    m.attach_minimal(os.urandom(16), "ghost", "acme", PerInterval(60), 20)
    back = CouponCashingManager.from_record(m.to_record(), server)
    assert back.to_record() == m.to_record()
    assert back.driver_use(sid, "alice", False, 180)[0][1] == Accepted(1000)
