import json
import socket

import pytest

from appcessory.coupon import CouponKey, derive_range
from appcessory.server import Accepted, AbuseCaseResult, CashingServer, GrantRecord, Granted, Refused, Rejected
from appcessory.wire import (ProtocolError, RemoteServer, TransportError, WireClient, WireServer,
                             dispatch, parse_addr)
from conftest import CRED, OTHER_CRED

ADMIN = b"\xaa" * 16


@pytest.fixture
def live(server):
    server.register_batch([(c, 10_000, "acme", "heli-1", "heli") for c in derive_range(CouponKey(b"\x01" * 16), 0, 100)],
                          [GrantRecord(b"\x05" * 16, CouponKey(b"\x06" * 16))])
    ws = WireServer(server, admin_credential=ADMIN)
    ws.start_background()
    yield server, ws
    ws.shutdown()
    ws.server_close()


def redeem_req(coupon, cred=CRED, author="alice"):
    return {"type": "redeem", "coupon": coupon.hex(), "author": author, "credential": cred.hex(), "user": "u"}


def test_parse_addr():
    assert parse_addr("127.0.0.1:80") == ("127.0.0.1", 80)
    assert parse_addr(":9") == ("127.0.0.1", 9)
    with pytest.raises(ValueError):
        parse_addr("localhost")


@pytest.mark.parametrize("req", [
    {"type": "redeem", "coupon": "ab", "author": "a", "credential": "00" * 16, "user": "u"},
    {"type": "redeem", "coupon": "AB" * 16, "author": "a", "credential": "00" * 16, "user": "u"},
    {"type": "redeem", "author": "a"},
    {"type": "redeem", "coupon": "00" * 16, "author": "a", "credential": "00" * 16, "user": "u", "now": -1},
    {"type": "grant", "secure_id": 5, "credential": "00" * 16},
    [1, 2, 3],
])
def test_dispatch_malformed(server, req):
    assert dispatch(server, req)["reason"] in ("malformed", "unknown_request")


def test_dispatch_unknown_type(server):
    assert dispatch(server, {"type": "explode"}) == {"type": "error", "reason": "unknown_request",
                                                      "detail": "explode"}


def test_protocol_round_trip(live):
    server, ws = live
    coupons = derive_range(CouponKey(b"\x01" * 16), 0, 3)
    with WireClient(ws.address) as client:
        out = client.pipeline([redeem_req(coupons[0]), redeem_req(coupons[0]),
                               redeem_req(coupons[1], OTHER_CRED), redeem_req(b"\x00" * 16)])
        assert out == [{"type": "accepted", "credited_udollars": 10_000},
                       {"type": "rejected", "reason": "already_redeemed"},
                       {"type": "rejected", "reason": "bad_credential"},
                       {"type": "rejected", "reason": "unknown_coupon"}]
        rep = client.request({"type": "report_vendor", "vendor": "acme"})
        assert rep["rows"] == server.report_vendor("acme")
        assert client.request({"type": "totals"})["reason"] == "bad_credential"
        totals = client.request({"type": "totals", "credential": ADMIN.hex()})
        assert totals["credited"] == 10_000


def test_malformed_line_keeps_connection(live):
    _, ws = live
    host, port = ws.server_address[:2]
    with socket.create_connection((host, port)) as sock:
        f = sock.makefile("rwb")
        f.write(b"{not json\n")
        f.write(json.dumps({"type": "report_unredeemed"}).encode() + b"\n")
        f.flush()
        assert json.loads(f.readline())["reason"] == "malformed"
        assert json.loads(f.readline())["type"] == "report"


def test_register_over_wire(live):
    server, ws = live
    fresh = derive_range(CouponKey(b"\x09" * 16), 0, 5)
    entries = [[c.hex(), 500, "acme", "x", "heli"] for c in fresh]
    with WireClient(ws.address) as client:
        assert client.request({"type": "register", "credential": ADMIN.hex(), "entries": entries}) == \
            {"type": "registered", "count": 5}
        dup = client.request({"type": "register", "credential": ADMIN.hex(), "entries": entries[:1]})
        assert dup["reason"] == "duplicate_coupon"
    assert len(server.ledger) == 105


def test_remote_server_adapter(live):
    server, ws = live
    c = derive_range(CouponKey(b"\x01" * 16), 0, 1)[0]
    with WireClient(ws.address) as client:
        remote = RemoteServer(client, CRED)
        assert remote.redeem(c, "mallory", CRED, "u", now=5) == Accepted(10_000)
        assert remote.redeem(c, "mallory", CRED, "u") == Rejected("already_redeemed")
        assert remote.grant_key(b"\x05" * 16, CRED, "m1") == Granted(CouponKey(b"\x06" * 16))
        assert remote.grant_key(b"\x05" * 16, CRED, "m2") == Refused("already_granted")
        assert remote.handle_abuse_report("mallory", "u") == AbuseCaseResult(True, 10_000, ())
        with pytest.raises(ProtocolError):
            RemoteServer(client, OTHER_CRED).handle_abuse_report("mallory", "u")


def test_transport_error_when_down():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    with pytest.raises(TransportError):
        WireClient(f"127.0.0.1:{port}", timeout=2).request({"type": "totals"})
