"""Line-delimited JSON protocol between managers/tools and the cashing server.

One request object per line, one response object per line, in order, so a
client may pipeline requests on a single connection.
"""
from __future__ import annotations

import hmac
import json
import logging
import socket
import socketserver
import threading
from typing import Iterable, Optional

from .coupon import CouponKey, MalformedCoupon, decode_coupon, decode_hex16
from .server import (AbuseCaseResult, Accepted, CashingServer, GrantRecord, Granted,
                     Refused, Rejected, DuplicateCoupon)

log = logging.getLogger(__name__)

MAX_LINE = 64 * 1024 * 1024


class ProtocolError(Exception):
    pass


class TransportError(ConnectionError):
    """The server could not be reached; the request may be retried unchanged."""


def encode(rec: dict) -> bytes:
    return json.dumps(rec, separators=(",", ":")).encode() + b"\n"


def parse_addr(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must be HOST:PORT, got {addr!r}")
    return host or "127.0.0.1", int(port)


def _error(reason: str, detail: str = "") -> dict:
    rec = {"type": "error", "reason": reason}
    if detail:
        rec["detail"] = detail
    return rec


def _opt_int(req: dict, name: str) -> Optional[int]:
    value = req.get(name)
    if value is None:
        return None
    if not isinstance(value, int) or isinstance(value, bool) or value < 0:
        raise ValueError(f"{name} must be a non-negative integer")
    return value


def dispatch(server: CashingServer, req: dict, admin_credential: Optional[bytes] = None) -> dict:
    """Serve one decoded request against ``server``; never raises."""
    try:
        kind = req.get("type") if isinstance(req, dict) else None
        if kind == "redeem":
            res = server.redeem(decode_coupon(req["coupon"]), str(req["author"]),
                                decode_hex16(req["credential"]), str(req["user"]), _opt_int(req, "now"))
            return res.to_wire()
        if kind == "grant":
            res = server.grant_key(decode_hex16(req["secure_id"]), decode_hex16(req["credential"]),
                                   req.get("manager"), _opt_int(req, "now"))
            return res.to_wire()
        if kind == "abuse_report":
            if not server.check_credential(decode_hex16(req["credential"])):
                return Rejected("bad_credential").to_wire()
            return server.handle_abuse_report(str(req["author"]), str(req["reporter"]),
                                              _opt_int(req, "now")).to_wire()
        if kind == "report_vendor":
            return {"type": "report", "rows": server.report_vendor(str(req["vendor"]))}
        if kind == "report_author":
            return {"type": "report", **server.report_author(str(req["author"]))}
        if kind == "report_unredeemed":
            return {"type": "report", "rows": server.report_unredeemed()}
        if kind == "popular_apps":
            return {"type": "report", "rows": server.popular_apps(str(req["accessory_type"]))}
        if kind in ("register", "settle", "totals"):
            if admin_credential is not None and not hmac.compare_digest(
                    admin_credential, decode_hex16(req.get("credential", "0" * 32))):
                return Rejected("bad_credential").to_wire()
            if kind == "totals":
                return {"type": "totals", **server.totals()}
            if kind == "settle":
                moved = server.settle(_opt_int(req, "now") or 0, _opt_int(req, "holding_period"))
                return {"type": "settled", "moved": [[a, m] for a, m in moved]}
            entries = [(decode_coupon(c), int(w), v, a, t) for c, w, v, a, t in req.get("entries", [])]
            grants = [GrantRecord(decode_hex16(s), CouponKey.from_hex(k)) for s, k in req.get("grants", [])]
            try:
                n = server.register_batch(entries, grants)
            except DuplicateCoupon as e:
                return _error("duplicate_coupon", e.coupon.hex())
            return {"type": "registered", "count": n}
        return _error("unknown_request", str(kind))
    except MalformedCoupon as e:
        return _error("malformed", str(e))
    except (KeyError, TypeError, ValueError) as e:
        return _error("malformed", f"{type(e).__name__}: {e}")


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        srv: WireServer = self.server
        while True:
            line = self.rfile.readline(MAX_LINE)
            if not line:
                return
            if not line.strip():
                continue
            try:
                req = json.loads(line)
            except json.JSONDecodeError as e:
                resp = _error("malformed", str(e))
            else:
                resp = dispatch(srv.cashing, req, srv.admin_credential)
            try:
                self.wfile.write(encode(resp))
            except OSError:
                return


class WireServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, cashing: CashingServer, addr: tuple[str, int] = ("127.0.0.1", 0),
                 admin_credential: Optional[bytes] = None):
        self.cashing = cashing
        self.admin_credential = admin_credential
        super().__init__(addr, _Handler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name="wire-server", daemon=True)
        t.start()
        return t


class WireClient:
    """One connection; requests are answered in order."""

    def __init__(self, addr: str, timeout: float = 30.0):
        self.addr = addr
        self.timeout = timeout
        self._sock = None
        self._rfile = None
        self._lock = threading.Lock()

    def _connect(self):
        if self._sock is None:
            try:
                self._sock = socket.create_connection(parse_addr(self.addr), timeout=self.timeout)
            except OSError as e:
                raise TransportError(f"cannot reach {self.addr}: {e}") from e
            self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._rfile = self._sock.makefile("rb")

    def close(self):
        if self._sock is not None:
            try:
                self._rfile.close()
                self._sock.close()
            finally:
                self._sock = self._rfile = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def pipeline(self, requests: Iterable[dict]) -> list[dict]:
        payload = b"".join(encode(r) for r in requests)
        with self._lock:
            self._connect()
            try:
                self._sock.sendall(payload)
                out = []
                for _ in range(payload.count(b"\n")):
                    line = self._rfile.readline(MAX_LINE)
                    if not line:
                        raise TransportError("connection closed by server")
                    out.append(json.loads(line))
                return out
            except OSError as e:
                self.close()
                raise TransportError(str(e)) from e
            except TransportError:
                self.close()
                raise

    def request(self, req: dict) -> dict:
        return self.pipeline([req])[0]


def _redeem_result(resp: dict):
    if resp.get("type") == "accepted":
        return Accepted(resp["credited_udollars"])
    if resp.get("type") == "rejected":
        return Rejected(resp["reason"])
    raise ProtocolError(f"unexpected redeem response {resp}")


class RemoteServer:
    """Exposes the manager-facing server calls over a :class:`WireClient`."""

    def __init__(self, client: WireClient, credential: bytes = b""):
        self.client = client
        # abuse reports are authenticated with the reporting manager's credential
        self.credential = credential

    def redeem(self, coupon: bytes, author_id: str, credential: bytes, user_pseudonym: str,
               now: Optional[int] = None):
        req = {"type": "redeem", "coupon": coupon.hex(), "author": author_id,
               "credential": credential.hex(), "user": user_pseudonym}
        if now is not None:
            req["now"] = now
        return _redeem_result(self.client.request(req))

    def grant_key(self, secure_id: bytes, credential: bytes, manager_id: Optional[str] = None,
                  now: Optional[int] = None):
        req = {"type": "grant", "secure_id": secure_id.hex(), "credential": credential.hex()}
        if manager_id is not None:
            req["manager"] = manager_id
        if now is not None:
            req["now"] = now
        resp = self.client.request(req)
        if resp.get("type") == "granted":
            return Granted(CouponKey.from_hex(resp["key"]))
        if resp.get("type") == "refused":
            return Refused(resp["reason"])
        raise ProtocolError(f"unexpected grant response {resp}")

    def handle_abuse_report(self, accused_author: str, reporter_pseudonym: str,
                            now: Optional[int] = None, credential: Optional[bytes] = None):
        cred = self.credential if credential is None else credential
        req = {"type": "abuse_report", "author": accused_author, "reporter": reporter_pseudonym,
               "credential": cred.hex()}
        if now is not None:
            req["now"] = now
        resp = self.client.request(req)
        if resp.get("type") == "abuse_case":
            return AbuseCaseResult(resp["suspended"], resp["clawed_back_udollars"],
                                   tuple((a, m) for a, m in resp["redistributed"]))
        if resp.get("type") == "rejected":
            raise ProtocolError(f"abuse report rejected: {resp['reason']}")
        raise ProtocolError(f"unexpected abuse response {resp}")
