"""Accessory-side control mechanism.

One :class:`AccessoryState` per physical unit.  Coupons are only released
while an app has declared itself willing, and only for qualifying use:
actuator commands on actuator-gated units, any command otherwise.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Optional, Union

from .coupon import CouponKey, check_coupon_max, derive_coupon, random_coupon

COUNTER_MODE = "counter_mode"
RANDOM_MODE = "random_mode"
MINIMAL_MODE = "minimal_mode"
MODES = (COUNTER_MODE, RANDOM_MODE, MINIMAL_MODE)

# gaps between qualifying use events longer than this are idle time
USAGE_GAP_CAP = 120


class AccessoryError(Exception):
    pass


class ClockRegression(AccessoryError):
    pass


class WrongMode(AccessoryError):
    pass


@dataclass(frozen=True)
class PerInterval:
    interval: int

    def __post_init__(self):
        if self.interval <= 0:
            raise ValueError("interval must be > 0")

    def scheduled(self, elapsed: int) -> int:
        return elapsed // self.interval

    def total(self) -> Optional[int]:
        return None

    def to_dict(self) -> dict:
        return {"kind": "per_interval", "interval": self.interval}

    def describe(self) -> str:
        return f"interval:{self.interval}"


@dataclass(frozen=True)
class Phased:
    phases: tuple[tuple[int, int], ...]

    def __post_init__(self):
        phases = tuple((int(c), int(d)) for c, d in self.phases)
        if not phases:
            raise ValueError("phased policy needs at least one phase")
        for count, duration in phases:
            if count < 1 or duration <= 0:
                raise ValueError(f"bad phase ({count}, {duration}): count >= 1 and duration > 0")
        object.__setattr__(self, "phases", phases)

    def scheduled(self, elapsed: int) -> int:
        # uniform spacing inside a phase: the k-th coupon of a phase (1-based)
        # falls due at phase_start + k * duration / count
        due = 0
        start = 0
        for count, duration in self.phases:
            if elapsed >= start + duration:
                due += count
                start += duration
                continue
            due += (elapsed - start) * count // duration
            break
        return due

    def total(self) -> Optional[int]:
        return sum(c for c, _ in self.phases)

    def to_dict(self) -> dict:
        return {"kind": "phased", "phases": [list(p) for p in self.phases]}

    def describe(self) -> str:
        return "phased:" + ",".join(f"{c}x{d}" for c, d in self.phases)


ReleasePolicy = Union[PerInterval, Phased]


def policy_from_dict(d: dict) -> ReleasePolicy:
    kind = d.get("kind")
    if kind == "per_interval":
        return PerInterval(int(d["interval"]))
    if kind == "phased":
        return Phased(tuple(tuple(p) for p in d["phases"]))
    raise ValueError(f"unknown release policy kind: {kind!r}")


def parse_policy(text: str) -> ReleasePolicy:
    """Parse ``interval:60`` or ``phased:100x3600,100x36000``."""
    kind, _, rest = text.partition(":")
    try:
        if kind == "interval":
            return PerInterval(int(rest))
        if kind == "phased":
            phases = []
            for part in rest.split(","):
                count, _, duration = part.partition("x")
                phases.append((int(count), int(duration)))
            return Phased(tuple(phases))
    except ValueError as e:
        raise ValueError(f"bad policy {text!r}: {e}") from None
    raise ValueError(f"bad policy {text!r}: expected interval:N or phased:CxD,...")


def policy_due(policy: ReleasePolicy, usage_elapsed: int, emitted_count: int) -> int:
    if emitted_count < 0:
        raise ValueError("emitted_count must be >= 0")
    return max(0, policy.scheduled(usage_elapsed) - emitted_count)


@dataclass
class AccessoryState:
    accessory_id: str
    vendor_id: str
    coupon_max: int
    mode: str = COUNTER_MODE
    key: Optional[CouponKey] = None
    policy: Optional[ReleasePolicy] = None
    actuator_gated: bool = False
    counter: int = 0
    emitted: int = 0
    willing_app: Optional[str] = None
    usage_elapsed: int = 0
    secure_id: Optional[bytes] = None
    secure_id_consumed: bool = False
    rng: Optional[random.Random] = field(default=None, repr=False)
    last_event: Optional[int] = None
    last_qualifying: Optional[int] = None

    def __post_init__(self):
        check_coupon_max(self.coupon_max)
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == MINIMAL_MODE:
            if self.secure_id is None or len(self.secure_id) != 16:
                raise ValueError("minimal accessories need a 16-byte secure id")
            # the unit holds no key and no release logic
            self.key = None
            self.policy = None
        else:
            if self.key is None or self.policy is None:
                raise ValueError(f"{self.mode} accessories need a key and a release policy")
            total = self.policy.total()
            if total is not None and total > self.coupon_max:
                raise ValueError(f"policy schedules {total} coupons but coupon_max is {self.coupon_max}")
        if self.mode == RANDOM_MODE and self.rng is None:
            raise ValueError("random_mode accessories need a seeded rng")
        if not 0 <= self.counter <= self.coupon_max:
            raise ValueError("counter out of range")

    def handle_willing(self, app_id: str) -> bool:
        self.willing_app = app_id
        return True

    def handle_use(self, is_actuator_command: bool, now: int) -> list[bytes]:
        if self.last_event is not None and now < self.last_event:
            raise ClockRegression(f"{self.accessory_id}: time went back from {self.last_event} to {now}")
        self.last_event = now
        if self.mode == MINIMAL_MODE:
            return []
        if self.actuator_gated and not is_actuator_command:
            return []
        if self.willing_app is None:
            # nobody will cash coupons, so this use does not count toward the schedule
            self.last_qualifying = None
            return []
        if self.last_qualifying is not None:
            gap = now - self.last_qualifying
            if gap <= USAGE_GAP_CAP:
                self.usage_elapsed += gap
        self.last_qualifying = now

        due = policy_due(self.policy, self.usage_elapsed, self.emitted)
        if self.mode == COUNTER_MODE:
            due = min(due, self.coupon_max - self.counter)
        out = []
        for _ in range(due):
            if self.mode == COUNTER_MODE:
                out.append(derive_coupon(self.key, self.counter))
                self.counter += 1
            else:
                out.append(random_coupon(self.key, self.coupon_max, self.rng))
            self.emitted += 1
        return out

    def read_secure_id(self) -> bytes:
        if self.mode != MINIMAL_MODE:
            raise WrongMode(f"{self.accessory_id} is {self.mode}, it has no secure id")
        return self.secure_id

    @property
    def exhausted(self) -> bool:
        if self.mode == COUNTER_MODE:
            return self.counter >= self.coupon_max
        if self.mode == RANDOM_MODE:
            total = self.policy.total()
            return total is not None and self.emitted >= total
        return True

    def on_link(self, line: str, now: int) -> list[str]:
        """Handle one app-to-accessory link record and return the reply records."""
        msg = decode_link(line)
        kind = msg["msg"]
        if kind == "WILLING":
            self.handle_willing(msg["app_id"])
            return []
        if kind == "USE":
            return [encode_link("COUPON", coupon_hex=c.hex())
                    for c in self.handle_use(bool(msg["is_actuator_command"]), now)]
        if kind == "READ_SECURE_ID":
            return [encode_link("SECURE_ID", id_hex=self.read_secure_id().hex())]
        raise AccessoryError(f"accessory does not accept {kind!r}")

    def to_record(self) -> dict:
        return {
            "accessory_id": self.accessory_id,
            "vendor_id": self.vendor_id,
            "mode": self.mode,
            "key": self.key.hex() if self.key else None,
            "coupon_max": self.coupon_max,
            "policy": self.policy.to_dict() if self.policy else None,
            "actuator_gated": self.actuator_gated,
            "counter": self.counter,
            "emitted": self.emitted,
            "willing_app": self.willing_app,
            "usage_elapsed": self.usage_elapsed,
            "secure_id": self.secure_id.hex() if self.secure_id else None,
            "secure_id_consumed": self.secure_id_consumed,
            "rng_state": _rng_state(self.rng),
            "last_event": self.last_event,
            "last_qualifying": self.last_qualifying,
        }

    @classmethod
    def from_record(cls, rec: dict) -> AccessoryState:
        rng = None
        if rec.get("rng_state") is not None:
            rng = random.Random()
            version, internal, gauss = rec["rng_state"]
            rng.setstate((version, tuple(internal), gauss))
        return cls(
            accessory_id=rec["accessory_id"],
            vendor_id=rec["vendor_id"],
            mode=rec["mode"],
            key=CouponKey.from_hex(rec["key"]) if rec.get("key") else None,
            coupon_max=rec["coupon_max"],
            policy=policy_from_dict(rec["policy"]) if rec.get("policy") else None,
            actuator_gated=rec["actuator_gated"],
            counter=rec["counter"],
            emitted=rec["emitted"],
            willing_app=rec["willing_app"],
            usage_elapsed=rec["usage_elapsed"],
            secure_id=bytes.fromhex(rec["secure_id"]) if rec.get("secure_id") else None,
            secure_id_consumed=rec["secure_id_consumed"],
            rng=rng,
            last_event=rec["last_event"],
            last_qualifying=rec["last_qualifying"],
        )


def _rng_state(rng):
    if rng is None:
        return None
    version, internal, gauss = rng.getstate()
    return [version, list(internal), gauss]


LINK_FIELDS = {
    "WILLING": ("app_id",),
    "USE": ("is_actuator_command",),
    "COUPON": ("coupon_hex",),
    "READ_SECURE_ID": (),
    "SECURE_ID": ("id_hex",),
}


def encode_link(kind: str, **fields) -> str:
    expected = LINK_FIELDS.get(kind)
    if expected is None or set(fields) != set(expected):
        raise AccessoryError(f"bad link record {kind} {sorted(fields)}")
    rec = {"msg": kind}
    rec.update((name, fields[name]) for name in expected)
    return json.dumps(rec, separators=(",", ":"))


def decode_link(line: str) -> dict:
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as e:
        raise AccessoryError(f"unparseable link record: {e}") from None
    if not isinstance(msg, dict) or msg.get("msg") not in LINK_FIELDS:
        raise AccessoryError(f"unknown link record: {line!r}")
    missing = [f for f in LINK_FIELDS[msg["msg"]] if f not in msg]
    if missing:
        raise AccessoryError(f"{msg['msg']} record missing {missing}")
    return msg
