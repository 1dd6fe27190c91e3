"""Scenario dictionaries shared by the simulator, CLI and acceptance tests."""


def nominal(duration=48 * 3600, seed=7):
    """One 500-coupon accessory, one willing app, sessions well past 500 minutes of use."""
    return {
        "seed": seed,
        "duration": duration,
        "accessories": [{
            "accessory_id": "heli-1", "vendor_id": "acme", "accessory_type": "helicopter",
            "coupon_max": 500, "worth": 10_000, "retail_price": 20_000_000,
            "policy": {"kind": "per_interval", "interval": 60},
        }],
        "apps": [{"app_id": "flight", "author": "alice",
                  "behavior": {"plays_sessions": {"session_length": 3600, "gap": 600}}}],
        "users": [{"user_id": "u1", "accessories": ["heli-1"], "apps": ["flight"]}],
    }


def abuse(actuator, seed=11):
    """Two honest games share a lamp with a calendar app that pokes it in the background.

    The honest apps earn 30 and 10 coupons; the background app earns 40 if it
    is allowed to, which the owner notices at the two-hour check.
    """
    return {
        "seed": seed,
        "duration": 4 * 3600,
        "accessories": [{
            "accessory_id": "lamp-1", "vendor_id": "lumo", "accessory_type": "lamp",
            "coupon_max": 100, "worth": 10_000, "retail_price": 10_000_000,
            "policy": {"kind": "per_interval", "interval": 60}, "actuator_gated": True,
        }],
        "apps": [
            {"app_id": "gameA", "author": "alice",
             "behavior": {"plays_sessions": {"session_length": 1800, "gap": 100_000, "stop": 1800}}},
            {"app_id": "gameB", "author": "bob",
             "behavior": {"plays_sessions": {"session_length": 540, "gap": 100_000, "start": 1860,
                                             "stop": 2400}}},
            {"app_id": "calendar", "author": "mallory",
             "behavior": {"malicious_background": {"poll_interval": 60, "start": 2460, "stop": 4800,
                                                   "sends_actuator_commands": actuator}}},
        ],
        "users": [{"user_id": "u1", "accessories": ["lamp-1"], "apps": ["gameA", "gameB", "calendar"],
                   "abuse_report_threshold": 390_000, "check_interval": 3600}],
    }


def minimal_pair(seed=5):
    """Two minimal units on one phone."""
    acc = lambda i: {"accessory_id": f"tag-{i}", "vendor_id": "acme", "accessory_type": "tag",
                     "mode": "minimal_mode", "coupon_max": 50, "worth": 1000, "retail_price": 50_000,
                     "policy": {"kind": "per_interval", "interval": 60}}
    return {
        "seed": seed, "duration": 3600,
        "accessories": [acc(1), acc(2)],
        "apps": [{"app_id": "tagger", "author": "alice",
                  "behavior": {"plays_sessions": {"session_length": 1200, "gap": 600}}}],
        "users": [{"user_id": "u1", "accessories": ["tag-1", "tag-2"], "apps": ["tagger"]}],
    }
