"""Coupon derivation and encoding.

A coupon is the AES-128 encryption of the accessory's coupon counter under
the accessory's coupon key.  The counter is laid out as a 128-bit big-endian
integer, so a single raw block is enough and no cipher mode is involved.
"""
from __future__ import annotations

import random
from dataclasses import dataclass
from typing import NamedTuple

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

COUPON_BYTES = 16
MAX_COUPON_MAX = 2**32
UDOLLARS_PER_DOLLAR = 1_000_000

Money = int
"""Integer micro-dollars; 1_000_000 is $1.00."""


class MalformedCoupon(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class CouponKey:
    raw: bytes

    def __post_init__(self):
        if not isinstance(self.raw, (bytes, bytearray)) or len(self.raw) != COUPON_BYTES:
            raise ValueError("coupon key must be exactly 16 bytes")
        object.__setattr__(self, "raw", bytes(self.raw))

    @classmethod
    def from_hex(cls, text: str) -> CouponKey:
        return cls(_parse_hex16(text, ValueError))

    def hex(self) -> str:
        return self.raw.hex()

    def __repr__(self) -> str:
        # keys end up in logs via dataclass reprs; keep them out
        return "CouponKey(<redacted>)"


class PregeneratedCoupon(NamedTuple):
    coupon: bytes
    worth: Money
    vendor_id: str


def dollars(amount: str) -> Money:
    """Parse a decimal dollar string such as ``"0.01"`` into micro-dollars."""
    whole, _, frac = amount.partition(".")
    if len(frac) > 6:
        raise ValueError(f"{amount!r} has sub-micro-dollar precision")
    return int(whole or "0") * UDOLLARS_PER_DOLLAR + int((frac + "000000")[:6])


def format_money(udollars: Money) -> str:
    sign = "-" if udollars < 0 else ""
    whole, frac = divmod(abs(udollars), UDOLLARS_PER_DOLLAR)
    return f"{sign}${whole}.{frac:06d}"


def check_coupon_max(coupon_max: int) -> int:
    if not isinstance(coupon_max, int) or isinstance(coupon_max, bool):
        raise TypeError("coupon_max must be an integer")
    if not 1 <= coupon_max <= MAX_COUPON_MAX:
        raise ValueError(f"coupon_max must be in [1, 2**32], got {coupon_max}")
    return coupon_max


def _encryptor(key: CouponKey):
    return Cipher(algorithms.AES(key.raw), modes.ECB()).encryptor()


def derive_coupon(key: CouponKey, counter: int) -> bytes:
    if counter < 0 or counter >= 2**128:
        raise ValueError(f"counter out of range: {counter}")
    return _encryptor(key).update(counter.to_bytes(COUPON_BYTES, "big"))


def derive_range(key: CouponKey, start: int, stop: int) -> list[bytes]:
    """Coupons for counters ``start .. stop-1`` in one cipher pass."""
    if start >= stop:
        return []
    plain = b"".join(i.to_bytes(COUPON_BYTES, "big") for i in range(start, stop))
    blob = _encryptor(key).update(plain)
    return [blob[i:i + COUPON_BYTES] for i in range(0, len(blob), COUPON_BYTES)]


def pregenerate_coupons(key: CouponKey, coupon_max: int, worth: Money,
                        vendor_id: str) -> list[PregeneratedCoupon]:
    check_coupon_max(coupon_max)
    if worth < 0:
        raise ValueError("worth must be non-negative")
    return [PregeneratedCoupon(c, worth, vendor_id) for c in derive_range(key, 0, coupon_max)]


def random_coupon(key: CouponKey, coupon_max: int, rng: random.Random) -> bytes:
    """Encrypt a counter drawn uniformly from ``[0, coupon_max)``.

    Repeats are expected; the server filters them as already redeemed.
    """
    check_coupon_max(coupon_max)
    return derive_coupon(key, rng.randrange(coupon_max))


def _parse_hex16(text: str, exc: type[Exception]) -> bytes:
    if not isinstance(text, str) or len(text) != 2 * COUPON_BYTES:
        raise exc(f"expected 32 hex characters, got {text!r}")
    try:
        return bytes.fromhex(text)
    except ValueError:
        raise exc(f"not a hex string: {text!r}") from None


def encode_coupon(coupon: bytes) -> str:
    if len(coupon) != COUPON_BYTES:
        raise MalformedCoupon(f"coupon must be 16 bytes, got {len(coupon)}")
    return coupon.hex()


def decode_coupon(text: str) -> bytes:
    # bytes.fromhex tolerates whitespace and upper case; the wire form does not
    if isinstance(text, str) and (text != text.lower() or any(ch.isspace() for ch in text)):
        raise MalformedCoupon(f"not a canonical coupon: {text!r}")
    return _parse_hex16(text, MalformedCoupon)


def decode_hex16(text: str) -> bytes:
    """Same canonical 32-hex form, used for secure ids and credentials."""
    return decode_coupon(text)
