"""Deterministic discrete-event simulation of accessories, apps, phones and one server.

Everything runs on one virtual clock (integer seconds).  Randomness comes from
a single scenario seed, split per actor by a hash of the actor id, so adding
an actor does not change anyone else's draws.
"""
from __future__ import annotations

import hashlib
import heapq
import json
import random
from dataclasses import MISSING, dataclass, field
from typing import Callable, Optional, Union

from .accessory import (COUNTER_MODE, MINIMAL_MODE, MODES, RANDOM_MODE, AccessoryState,
                        ReleasePolicy, decode_link, encode_link, policy_from_dict)
from .coupon import COUPON_BYTES, CouponKey, derive_range
from .manager import CouponCashingManager
from .server import (Accepted, CashingServer, FlatPerCoupon, GrantRecord, Rejected,
                     RewardPolicy, conservation_gap, reward_policy_from_dict)


class ScenarioError(ValueError):
    """A scenario failed validation; the message starts with the offending field."""


@dataclass(frozen=True)
class PlaysSessions:
    session_length: int
    gap: int
    willing: bool = True
    start: int = 0
    stop: Optional[int] = None
    use_interval: int = 60


@dataclass(frozen=True)
class MaliciousBackground:
    poll_interval: int
    sends_actuator_commands: bool
    start: int = 0
    stop: Optional[int] = None


@dataclass(frozen=True)
class Forger:
    """Submits uniformly random 128-bit values as coupons with a valid manager credential."""
    submissions: int
    start: int = 0


Behavior = Union[PlaysSessions, MaliciousBackground, Forger]
_BEHAVIORS = {"plays_sessions": PlaysSessions, "malicious_background": MaliciousBackground,
              "forger": Forger}


@dataclass(frozen=True)
class AccessorySpec:
    accessory_id: str
    coupon_max: int
    worth: int
    retail_price: int
    policy: Optional[ReleasePolicy] = None
    mode: str = COUNTER_MODE
    actuator_gated: bool = False
    vendor_id: str = "vendor"
    accessory_type: str = "accessory"


@dataclass(frozen=True)
class AppSpec:
    app_id: str
    author: str
    behavior: Behavior


@dataclass(frozen=True)
class UserSpec:
    user_id: str
    accessories: tuple[str, ...] = ()
    apps: tuple[str, ...] = ()
    abuse_report_threshold: Optional[int] = None
    check_interval: int = 3600


@dataclass(frozen=True)
class Scenario:
    seed: int
    duration: int
    accessories: tuple[AccessorySpec, ...] = ()
    apps: tuple[AppSpec, ...] = ()
    users: tuple[UserSpec, ...] = ()
    reward_policy: RewardPolicy = field(default_factory=FlatPerCoupon)
    holding_period: int = 7 * 86400
    settle_interval: int = 86400
    allow_overvalued: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> Scenario:
        try:
            return _scenario_from_dict(d)
        except ScenarioError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise ScenarioError(f"scenario: {type(e).__name__}: {e}") from None

    @classmethod
    def load(cls, path) -> Scenario:
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as e:
                raise ScenarioError(f"scenario file: {e}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        def behavior(b):
            kind = next(k for k, v in _BEHAVIORS.items() if isinstance(b, v))
            return {kind: {k: getattr(b, k) for k in b.__dataclass_fields__}}
        return {
            "seed": self.seed,
            "duration": self.duration,
            "accessories": [{
                "accessory_id": a.accessory_id, "vendor_id": a.vendor_id,
                "accessory_type": a.accessory_type, "mode": a.mode,
                "coupon_max": a.coupon_max, "worth": a.worth, "retail_price": a.retail_price,
                "policy": a.policy.to_dict() if a.policy else None,
                "actuator_gated": a.actuator_gated,
            } for a in self.accessories],
            "apps": [{"app_id": a.app_id, "author": a.author, "behavior": behavior(a.behavior)}
                     for a in self.apps],
            "users": [{"user_id": u.user_id, "accessories": list(u.accessories), "apps": list(u.apps),
                       "abuse_report_threshold": u.abuse_report_threshold,
                       "check_interval": u.check_interval} for u in self.users],
            "reward_policy": self.reward_policy.to_dict(),
            "holding_period": self.holding_period,
            "settle_interval": self.settle_interval,
            "allow_overvalued": self.allow_overvalued,
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def _fields(d: dict, where: str, allowed: set[str]) -> dict:
    if not isinstance(d, dict):
        raise ScenarioError(f"{where}: expected an object")
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ScenarioError(f"{where}.{unknown[0]}: unknown field")
    return d


def _int(d: dict, name: str, where: str, default=..., minimum: int = 0):
    if name not in d or d[name] is None:
        if default is ...:
            raise ScenarioError(f"{where}.{name}: required")
        return default
    v = d[name]
    if not isinstance(v, int) or isinstance(v, bool) or v < minimum:
        raise ScenarioError(f"{where}.{name}: expected an integer >= {minimum}, got {v!r}")
    return v


def _scenario_from_dict(d: dict) -> Scenario:
    _fields(d, "scenario", {"seed", "duration", "accessories", "apps", "users", "reward_policy",
                            "holding_period", "settle_interval", "allow_overvalued"})
    accessories = []
    for i, a in enumerate(d.get("accessories", [])):
        where = f"accessories[{i}]"
        _fields(a, where, {"accessory_id", "vendor_id", "accessory_type", "mode", "coupon_max", "worth",
                           "retail_price", "policy", "actuator_gated"})
        if "accessory_id" not in a:
            raise ScenarioError(f"{where}.accessory_id: required")
        mode = a.get("mode", COUNTER_MODE)
        if mode not in MODES:
            raise ScenarioError(f"{where}.mode: must be one of {', '.join(MODES)}")
        try:
            policy = policy_from_dict(a["policy"]) if a.get("policy") else None
        except (KeyError, TypeError, ValueError) as e:
            raise ScenarioError(f"{where}.policy: {e}") from None
        if policy is None:
            raise ScenarioError(f"{where}.policy: required")
        accessories.append(AccessorySpec(
            accessory_id=str(a["accessory_id"]),
            vendor_id=str(a.get("vendor_id", "vendor")),
            accessory_type=str(a.get("accessory_type", "accessory")),
            mode=mode,
            coupon_max=_int(a, "coupon_max", where, minimum=1),
            worth=_int(a, "worth", where),
            retail_price=_int(a, "retail_price", where),
            policy=policy,
            actuator_gated=bool(a.get("actuator_gated", False)),
        ))
    apps = []
    for i, a in enumerate(d.get("apps", [])):
        where = f"apps[{i}]"
        _fields(a, where, {"app_id", "author", "behavior"})
        for name in ("app_id", "author", "behavior"):
            if name not in a:
                raise ScenarioError(f"{where}.{name}: required")
        b = a["behavior"]
        if not isinstance(b, dict) or len(b) != 1 or next(iter(b)) not in _BEHAVIORS:
            raise ScenarioError(f"{where}.behavior: expected one of {sorted(_BEHAVIORS)}")
        (kind, params), = b.items()
        cls = _BEHAVIORS[kind]
        bwhere = f"{where}.behavior.{kind}"
        _fields(params, bwhere, set(cls.__dataclass_fields__))
        kwargs = {}
        for name, f in cls.__dataclass_fields__.items():
            has_default = f.default is not MISSING
            if name in ("willing", "sends_actuator_commands"):
                if name in params:
                    kwargs[name] = bool(params[name])
                elif not has_default:
                    raise ScenarioError(f"{bwhere}.{name}: required")
                continue
            minimum = 1 if name in ("session_length", "poll_interval", "use_interval") else 0
            kwargs[name] = _int(params, name, bwhere, default=f.default if has_default else ...,
                                minimum=minimum)
        apps.append(AppSpec(str(a["app_id"]), str(a["author"]), cls(**kwargs)))
    users = []
    for i, u in enumerate(d.get("users", [])):
        where = f"users[{i}]"
        _fields(u, where, {"user_id", "accessories", "apps", "abuse_report_threshold", "check_interval"})
        if "user_id" not in u:
            raise ScenarioError(f"{where}.user_id: required")
        users.append(UserSpec(
            user_id=str(u["user_id"]),
            accessories=tuple(str(x) for x in u.get("accessories", [])),
            apps=tuple(str(x) for x in u.get("apps", [])),
            abuse_report_threshold=_int(u, "abuse_report_threshold", where, default=None),
            check_interval=_int(u, "check_interval", where, default=3600, minimum=1),
        ))
    try:
        reward = reward_policy_from_dict(d["reward_policy"]) if d.get("reward_policy") else FlatPerCoupon()
    except (KeyError, TypeError, ValueError) as e:
        raise ScenarioError(f"scenario.reward_policy: {e}") from None
    s = Scenario(
        seed=_int(d, "seed", "scenario"),
        duration=_int(d, "duration", "scenario"),
        accessories=tuple(accessories), apps=tuple(apps), users=tuple(users),
        reward_policy=reward,
        holding_period=_int(d, "holding_period", "scenario", default=7 * 86400),
        settle_interval=_int(d, "settle_interval", "scenario", default=86400, minimum=1),
        allow_overvalued=bool(d.get("allow_overvalued", False)),
    )
    validate(s)
    return s


def validate(s: Scenario) -> None:
    if not 0 <= s.seed < 2**64:
        raise ScenarioError("scenario.seed: must fit in 64 bits")
    acc_ids = [a.accessory_id for a in s.accessories]
    app_ids = [a.app_id for a in s.apps]
    user_ids = [u.user_id for u in s.users]
    for name, ids in (("accessories", acc_ids), ("apps", app_ids), ("users", user_ids)):
        dupes = sorted({x for x in ids if ids.count(x) > 1})
        if dupes:
            raise ScenarioError(f"scenario.{name}: duplicate id {dupes[0]!r}")
    for i, a in enumerate(s.accessories):
        where = f"accessories[{i}]"
        total = a.policy.total() if a.policy else None
        if total is not None and total > a.coupon_max:
            raise ScenarioError(f"{where}.policy: schedules {total} coupons, coupon_max is {a.coupon_max}")
        if not s.allow_overvalued and a.coupon_max * a.worth > a.retail_price:
            raise ScenarioError(
                f"{where}.retail_price: coupons worth {a.coupon_max * a.worth} exceed retail price "
                f"{a.retail_price} (set allow_overvalued to permit)")
    owner: dict[str, str] = {}
    for i, u in enumerate(s.users):
        for acc in u.accessories:
            if acc not in acc_ids:
                raise ScenarioError(f"users[{i}].accessories: unknown accessory {acc!r}")
            if acc in owner:
                raise ScenarioError(f"users[{i}].accessories: {acc!r} is already owned by {owner[acc]!r}")
            owner[acc] = u.user_id
        for app in u.apps:
            if app not in app_ids:
                raise ScenarioError(f"users[{i}].apps: unknown app {app!r}")


def actor_rng(seed: int, actor: str) -> random.Random:
    digest = hashlib.sha256(f"{seed}/{actor}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def _canon(rec) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


@dataclass
class SimResult:
    scenario: Scenario
    events: list[dict]
    ledger: list[str]
    metrics: dict
    server: CashingServer = field(repr=False)
    managers: dict = field(repr=False, default_factory=dict)

    def event_log_text(self) -> str:
        return "".join(_canon(e) + "\n" for e in self.events)

    def ledger_text(self) -> str:
        return "".join(line + "\n" for line in self.ledger)

    def metrics_text(self) -> str:
        return format_metrics(self.metrics)

    def files(self) -> dict[str, str]:
        return {"events.jsonl": self.event_log_text(), "ledger.jsonl": self.ledger_text(),
                "metrics.tsv": self.metrics_text()}


def format_metrics(metrics: dict) -> str:
    return "".join(f"{k}\t{metrics[k]}\n" for k in sorted(metrics))


def parse_metrics(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = line.partition("\t")
        if not sep:
            raise ValueError(f"metrics line {lineno}: expected KEY<TAB>VALUE")
        out[key] = int(value) if value.lstrip("-").isdigit() else value
    return out


class _Sim:
    def __init__(self, s: Scenario, server_factory: Callable[..., CashingServer] = CashingServer):
        self.s = s
        self.queue: list = []
        self.seq = 0
        self.events: list[dict] = []
        self.now = 0
        creds = {u.user_id: actor_rng(s.seed, f"manager:{u.user_id}").randbytes(16) for u in s.users}
        self.server = server_factory(
            creds.values(), reward_policy=s.reward_policy,
            pseudonym_key=actor_rng(s.seed, "server").randbytes(16),
            holding_period=s.holding_period)
        self.managers = {u.user_id: CouponCashingManager(f"mgr-{u.user_id}", creds[u.user_id], u.user_id,
                                                         self.server) for u in s.users}
        self.specs = {a.accessory_id: a for a in s.accessories}
        self.apps = {a.app_id: a for a in s.apps}
        self.users = {u.user_id: u for u in s.users}
        self.units: dict[str, AccessoryState] = {}
        self.emitted: dict[str, int] = {a.accessory_id: 0 for a in s.accessories}
        self.redeemed: dict[str, int] = {a.accessory_id: 0 for a in s.accessories}
        self.foregrounded: dict[str, set] = {u.user_id: set() for u in s.users}
        self.reported: dict[str, set] = {u.user_id: set() for u in s.users}
        self.settle_gaps: list[int] = []
        self._provision()

    def _provision(self) -> None:
        for spec in self.s.accessories:
            rng = actor_rng(self.s.seed, f"accessory:{spec.accessory_id}")
            key = CouponKey(rng.randbytes(16))
            secure_id = rng.randbytes(16) if spec.mode == MINIMAL_MODE else None
            entries = [(c, spec.worth, spec.vendor_id, spec.accessory_id, spec.accessory_type)
                       for c in derive_range(key, 0, spec.coupon_max)]
            grants = [GrantRecord(secure_id, key)] if secure_id else []
            self.server.register_batch(entries, grants)
            self.units[spec.accessory_id] = AccessoryState(
                accessory_id=spec.accessory_id, vendor_id=spec.vendor_id, coupon_max=spec.coupon_max,
                mode=spec.mode, key=key, policy=spec.policy, actuator_gated=spec.actuator_gated,
                secure_id=secure_id,
                rng=actor_rng(self.s.seed, f"draws:{spec.accessory_id}") if spec.mode == RANDOM_MODE else None)

    # scheduling

    def at(self, t: int, fn, *args) -> None:
        heapq.heappush(self.queue, (t, self.seq, fn, args))
        self.seq += 1

    def log(self, actor: str, kind: str, **payload) -> None:
        self.events.append({"seq": len(self.events), "time": self.now, "actor": actor,
                            "kind": kind, "payload": payload})

    def run(self) -> None:
        s = self.s
        for u in s.users:
            for app_id in u.apps:
                b = self.apps[app_id].behavior
                self.at(b.start, self._app_step, u.user_id, app_id, b.start)
            if u.abuse_report_threshold is not None:
                self.at(u.check_interval, self._user_check, u.user_id)
        if s.settle_interval:
            self.at(s.settle_interval, self._settle)
        while self.queue and self.queue[0][0] < s.duration:
            t, _, fn, args = heapq.heappop(self.queue)
            self.now = t
            fn(*args)

    # actors

    def _app_step(self, user_id: str, app_id: str, session_start: int) -> None:
        app = self.apps[app_id]
        b = app.behavior
        user = self.users[user_id]
        if isinstance(b, Forger):
            self._forge(user_id, app)
            return
        if b.stop is not None and self.now > b.stop:
            return
        if isinstance(b, PlaysSessions):
            if self.now == session_start:
                self.foregrounded[user_id].add(app.author)
                self.log(app_id, "session_start", user=user_id)
                if b.willing:
                    for acc in user.accessories:
                        self._willing(user_id, app, acc)
            for acc in user.accessories:
                self._use(user_id, app, acc, True)
            nxt = self.now + b.use_interval
            end = session_start + b.session_length
            if nxt <= end:
                self.at(nxt, self._app_step, user_id, app_id, session_start)
            else:
                self.log(app_id, "session_end", user=user_id)
                nxt_session = end + (b.gap or b.use_interval)
                self.at(nxt_session, self._app_step, user_id, app_id, nxt_session)
        else:
            for acc in user.accessories:
                self._willing(user_id, app, acc)
                self._use(user_id, app, acc, b.sends_actuator_commands)
            self.at(self.now + b.poll_interval, self._app_step, user_id, app_id, session_start)

    def _willing(self, user_id: str, app: AppSpec, acc: str) -> None:
        unit = self.units[acc]
        self.log(app.app_id, "willing", accessory=acc, user=user_id)
        if unit.mode == MINIMAL_MODE:
            mgr = self.managers[user_id]
            self._attach(mgr, unit)
            mgr.driver_willing(unit.secure_id, app.app_id)
        else:
            unit.on_link(encode_link("WILLING", app_id=app.app_id), self.now)

    def _attach(self, mgr: CouponCashingManager, unit: AccessoryState) -> None:
        sid = decode_link(unit.on_link(encode_link("READ_SECURE_ID"), self.now)[0])["id_hex"]
        spec = self.specs[unit.accessory_id]
        res = mgr.attach_minimal(bytes.fromhex(sid), unit.accessory_id, unit.vendor_id, spec.policy,
                                 spec.coupon_max, actuator_gated=spec.actuator_gated, now=self.now)
        if res is not None:
            self.log(mgr.manager_id, "grant", accessory=unit.accessory_id,
                     result=res.to_wire()["type"], reason=getattr(res, "reason", None))

    def _use(self, user_id: str, app: AppSpec, acc: str, actuator: bool) -> None:
        unit = self.units[acc]
        mgr = self.managers[user_id]
        self.log(app.app_id, "use", accessory=acc, actuator=actuator)
        if unit.mode == MINIMAL_MODE:
            # the manager runs the control mechanism on the unit's behalf
            self._attach(mgr, unit)
            driver = mgr.granted_keys.get(unit.secure_id)
            if driver is None:
                return
            coupons = driver.handle_use(actuator, self.now)
            recipient = self.apps.get(driver.willing_app)
        else:
            replies = unit.on_link(encode_link("USE", is_actuator_command=actuator), self.now)
            coupons = [bytes.fromhex(decode_link(line)["coupon_hex"]) for line in replies]
            recipient = self.apps.get(unit.willing_app)
        for c in coupons:
            self._emit_and_deliver(user_id, recipient, acc, c)

    def _emit_and_deliver(self, user_id: str, app: AppSpec, acc: str, coupon: bytes) -> None:
        self.emitted[acc] += 1
        self.log(acc, "coupon_emitted", app=app.app_id, coupon=coupon.hex())
        mgr = self.managers[user_id]
        res = mgr.deliver(coupon, acc, app.author, self.now)
        if isinstance(res, Accepted):
            self.redeemed[acc] += 1
            self.log(mgr.manager_id, "redeem_result", coupon=coupon.hex(), accessory=acc, author=app.author,
                     result="accepted", credited=res.credited, worth=self.specs[acc].worth)
        else:
            self.log(mgr.manager_id, "redeem_result", coupon=coupon.hex(), accessory=acc, author=app.author,
                     result="rejected", reason=res.reason)

    def _forge(self, user_id: str, app: AppSpec) -> None:
        rng = actor_rng(self.s.seed, f"forger:{app.app_id}:{user_id}")
        mgr = self.managers[user_id]
        accepted = 0
        reasons: dict[str, int] = {}
        for _ in range(app.behavior.submissions):
            res = self.server.redeem(rng.randbytes(COUPON_BYTES), app.author, mgr.credential, user_id, self.now)
            if isinstance(res, Accepted):
                accepted += 1
            else:
                reasons[res.reason] = reasons.get(res.reason, 0) + 1
        self.log(app.app_id, "forgery", submitted=app.behavior.submissions, accepted=accepted,
                 rejected=dict(sorted(reasons.items())))

    def _user_check(self, user_id: str) -> None:
        user = self.users[user_id]
        mgr = self.managers[user_id]
        per_author: dict[str, int] = {}
        for author, _acc, total in mgr.user_report():
            per_author[author] = per_author.get(author, 0) + total
        for author in sorted(per_author):
            if (author in self.foregrounded[user_id] or author in self.reported[user_id]
                    or per_author[author] <= user.abuse_report_threshold):
                continue
            before = self._gap()
            res = mgr.report_abuse(author, self.now)
            self.reported[user_id].add(author)
            self.log(user_id, "abuse_report", author=author, suspended=res.suspended,
                     clawed_back=res.clawed_back, redistributed=[list(x) for x in res.redistributed],
                     conservation_gap_before=before, conservation_gap_after=self._gap())
        self.at(self.now + user.check_interval, self._user_check, user_id)

    def _gap(self) -> int:
        return conservation_gap(self.server.totals())

    def _settle(self) -> None:
        moved = self.server.settle(self.now, self.s.holding_period)
        gap = self._gap()
        self.settle_gaps.append(gap)
        self.log("server", "settle", moved=[list(m) for m in moved], conservation_gap=gap)
        self.at(self.now + self.s.settle_interval, self._settle)

    def metrics(self) -> dict:
        totals = self.server.totals()
        m = dict(totals)
        m["conservation_gap"] = conservation_gap(totals)
        m["events"] = len(self.events)
        for author in sorted(self.server.accounts):
            acct = self.server.accounts[author]
            m[f"author.{author}.pending"] = acct.pending
            m[f"author.{author}.paid"] = acct.paid
            m[f"author.{author}.recovered"] = acct.recovered
        for acc in sorted(self.emitted):
            m[f"accessory.{acc}.emitted"] = self.emitted[acc]
            m[f"accessory.{acc}.redeemed"] = self.redeemed[acc]
        return m


def run(s: Scenario, server_factory: Callable[..., CashingServer] = CashingServer) -> SimResult:
    validate(s)
    sim = _Sim(s, server_factory)
    sim.run()
    return SimResult(s, sim.events, list(sim.server.journal), sim.metrics(), sim.server, sim.managers)


def recount(s: Scenario, events: list[dict]) -> dict:
    """Rebuild the money buckets from the scenario and the event log alone."""
    registered = sum(a.coupon_max * a.worth for a in s.accessories)
    redeemed_worth = credited_gross = clawed = redistributed = 0
    for e in events:
        p = e["payload"]
        if e["kind"] == "redeem_result" and p["result"] == "accepted":
            redeemed_worth += p["worth"]
            credited_gross += p["credited"]
        elif e["kind"] == "abuse_report":
            clawed += p["clawed_back"]
            redistributed += sum(m for _, m in p["redistributed"])
    return {
        "registered": registered,
        "unredeemed": registered - redeemed_worth,
        "credited": credited_gross - clawed + redistributed,
        "fees_plus_remainder": redeemed_worth - credited_gross,
        "recovered": clawed,
        "redistributed": redistributed,
    }


def metrics(r: SimResult) -> tuple[bool, list[tuple[str, str, str]]]:
    """Conservation verdict plus a ``(check, expected, observed)`` summary table."""
    return verify(r.scenario, r.events, r.metrics)


def verify(s: Scenario, events: list[dict], m: dict) -> tuple[bool, list[tuple[str, str, str]]]:
    rc = recount(s, events)
    rows = []
    identity = m["credited"] + m["fees"] + m["unredeemed"] + m["remainder"] + m["recovered"] - m["redistributed"]
    rows.append(("identity", str(m["registered"]), str(identity)))
    for key in ("registered", "unredeemed", "credited", "recovered", "redistributed"):
        rows.append((key, str(rc[key]), str(m[key])))
    rows.append(("fees+remainder", str(rc["fees_plus_remainder"]), str(m["fees"] + m["remainder"])))
    rows.append(("conservation_gap", "0", str(m.get("conservation_gap"))))
    for e in events:
        if e["kind"] == "settle":
            rows.append((f"settle@{e['time']}", "0", str(e["payload"]["conservation_gap"])))
        elif e["kind"] == "abuse_report":
            rows.append((f"abuse@{e['time']}.before", "0", str(e["payload"]["conservation_gap_before"])))
            rows.append((f"abuse@{e['time']}.after", "0", str(e["payload"]["conservation_gap_after"])))
    ok = all(expected == observed for _, expected, observed in rows)
    return ok, rows


def replay_check(s: Scenario) -> bool:
    a = run(s).files()
    b = run(Scenario.from_dict(json.loads(s.canonical_json()))).files()
    return a == b
