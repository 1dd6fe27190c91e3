"""Coupon micropayments from accessory makers to app authors."""
from .accessory import AccessoryState, Phased, PerInterval, policy_due
from .coupon import (CouponKey, decode_coupon, derive_coupon, encode_coupon, pregenerate_coupons,
                     random_coupon)
from .manager import CouponCashingManager
from .server import (Accepted, CashingServer, DecayingPerAuthor, FlatPerCoupon, Granted, Refused,
                     Rejected)

__version__ = "0.1.0"

__all__ = [
    "AccessoryState", "Phased", "PerInterval", "policy_due",
    "CouponKey", "decode_coupon", "derive_coupon", "encode_coupon", "pregenerate_coupons", "random_coupon",
    "CouponCashingManager",
    "Accepted", "CashingServer", "DecayingPerAuthor", "FlatPerCoupon", "Granted", "Refused", "Rejected",
]
