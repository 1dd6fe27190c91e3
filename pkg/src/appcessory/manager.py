"""Coupon cashing manager: the phone-side relay between apps and the server.

Apps hand coupons to the manager; the manager adds its credential and
forwards them.  For minimal accessories it also acts as the device driver,
holding the granted key and the coupon counter on the device's behalf.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .accessory import COUNTER_MODE, AccessoryState, ReleasePolicy
from .coupon import CouponKey
from .server import Accepted, Granted, Refused, AbuseCaseResult
from .wire import TransportError

log = logging.getLogger(__name__)


class UnknownAuthor(LookupError):
    """Abuse report against an author that never got paid through this manager."""


@dataclass
class Delivery:
    coupon: bytes
    accessory_id: str
    author: str
    result: object


@dataclass
class CouponCashingManager:
    manager_id: str
    credential: bytes
    owner_user: str
    server: object = field(repr=False)
    max_attempts: int = 3
    tallies: dict = field(default_factory=lambda: defaultdict(int))
    # secure id -> driver state; the driver's counter is the device's external counter
    granted_keys: dict = field(default_factory=dict)
    refused: dict = field(default_factory=dict)
    seen_accessories: set = field(default_factory=set)
    deliveries: list = field(default_factory=list, repr=False)

    def deliver(self, coupon: bytes, accessory_id: str, app_author_id: str,
                now: Optional[int] = None):
        """Forward one coupon; retries on transport failure with the same payload."""
        self.seen_accessories.add(accessory_id)
        for attempt in range(1, self.max_attempts + 1):
            try:
                result = self.server.redeem(coupon, app_author_id, self.credential,
                                            self.owner_user, now)
                break
            except TransportError:
                if attempt == self.max_attempts:
                    raise
                log.warning("redeem of %s failed (attempt %d), retrying", coupon.hex(), attempt)
        if isinstance(result, Accepted):
            self.tallies[(app_author_id, accessory_id)] += result.credited
        self.deliveries.append(Delivery(coupon, accessory_id, app_author_id, result))
        return result

    def user_report(self) -> list[tuple[str, str, int]]:
        return sorted((author, acc, total) for (author, acc), total in self.tallies.items())

    def tallied_authors(self) -> set[str]:
        return {author for author, _ in self.tallies}

    def report_abuse(self, accused_author: str, now: Optional[int] = None) -> AbuseCaseResult:
        if accused_author not in self.tallied_authors():
            raise UnknownAuthor(f"{accused_author} does not appear in this phone's report")
        return self.server.handle_abuse_report(accused_author, self.owner_user, now)

    # driver mode for minimal accessories

    def attach_minimal(self, secure_id: bytes, accessory_id: str, vendor_id: str,
                       policy: ReleasePolicy, coupon_max: int, *, actuator_gated: bool = False,
                       now: Optional[int] = None):
        """Obtain the key for a minimal accessory, once; returns Granted, Refused or None if held."""
        if secure_id in self.granted_keys:
            return None
        if secure_id in self.refused:
            return self.refused[secure_id]
        res = self.server.grant_key(secure_id, self.credential, self.manager_id, now)
        if isinstance(res, Refused):
            self.refused[secure_id] = res
            return res
        assert isinstance(res, Granted)
        self.granted_keys[secure_id] = AccessoryState(
            accessory_id=accessory_id, vendor_id=vendor_id, coupon_max=coupon_max,
            mode=COUNTER_MODE, key=res.key, policy=policy, actuator_gated=actuator_gated)
        self.seen_accessories.add(accessory_id)
        return res

    def driver_willing(self, secure_id: bytes, app_id: str) -> bool:
        driver = self.granted_keys.get(secure_id)
        if driver is None:
            return False
        return driver.handle_willing(app_id)

    def driver_use(self, secure_id: bytes, app_author_id: str, is_actuator_command: bool,
                   now: int) -> list[tuple[bytes, object]]:
        """Run the control mechanism for a minimal unit and deliver what falls due."""
        driver = self.granted_keys.get(secure_id)
        if driver is None:
            return []
        coupons = driver.handle_use(is_actuator_command, now)
        return [(c, self.deliver(c, driver.accessory_id, app_author_id, now)) for c in coupons]

    def drive_minimal(self, secure_id: bytes, accessory_id: str, vendor_id: str,
                      policy: ReleasePolicy, coupon_max: int, app_author_id: str,
                      use_events: Iterable[tuple[int, bool]], *, actuator_gated: bool = False):
        """Attach (if needed) and feed ``(time, is_actuator_command)`` use events.

        Returns ``(status, emitted)`` where status is the grant outcome of this
        call (None when the key was already held) and emitted the coupons derived.
        """
        events = list(use_events)
        start = events[0][0] if events else None
        status = self.attach_minimal(secure_id, accessory_id, vendor_id, policy, coupon_max,
                                     actuator_gated=actuator_gated, now=start)
        if secure_id not in self.granted_keys:
            return status, []
        self.driver_willing(secure_id, app_author_id)
        emitted = []
        for t, actuator in events:
            emitted.extend(c for c, _ in self.driver_use(secure_id, app_author_id, actuator, t))
        return status, emitted

    def to_record(self) -> dict:
        return {
            "manager_id": self.manager_id,
            "credential": self.credential.hex(),
            "owner_user": self.owner_user,
            "tallies": [[a, acc, m] for (a, acc), m in sorted(self.tallies.items())],
            "granted_keys": [[sid.hex(), d.to_record()] for sid, d in sorted(self.granted_keys.items())],
            "refused": [[sid.hex(), r.reason] for sid, r in sorted(self.refused.items())],
            "seen_accessories": sorted(self.seen_accessories),
        }

    @classmethod
    def from_record(cls, rec: dict, server) -> CouponCashingManager:
        m = cls(rec["manager_id"], bytes.fromhex(rec["credential"]), rec["owner_user"], server)
        for a, acc, amount in rec["tallies"]:
            m.tallies[(a, acc)] = amount
        for sid, drec in rec["granted_keys"]:
            m.granted_keys[bytes.fromhex(sid)] = AccessoryState.from_record(drec)
        for sid, reason in rec["refused"]:
            m.refused[bytes.fromhex(sid)] = Refused(reason)
        m.seen_accessories = set(rec["seen_accessories"])
        return m


def external_counter(manager: CouponCashingManager, secure_id: bytes) -> Optional[int]:
    driver = manager.granted_keys.get(secure_id)
    return None if driver is None else driver.counter


__all__ = ["CouponCashingManager", "Delivery", "UnknownAuthor", "external_counter", "CouponKey"]
