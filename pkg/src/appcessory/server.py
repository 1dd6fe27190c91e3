"""Coupon cashing server: the redemption ledger and everything around it.

All state changes go through a single lock, which makes redeem and
grant_key linearizable and lets reports see a consistent prefix of history.
Every state change is also appended to an in-memory journal (and optionally a
file) as one JSON line; replaying the journal rebuilds the server exactly.
"""
from __future__ import annotations

import hashlib
import hmac
import json
import logging
import os
import threading
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import IO, Iterable, Optional, Sequence, Union

from .coupon import CouponKey, Money, decode_coupon

log = logging.getLogger(__name__)

JOURNAL_VERSION = 1
PPM = 1_000_000
REDISTRIBUTION = "(redistribution)"

BAD_CREDENTIAL = "bad_credential"
UNKNOWN_COUPON = "unknown_coupon"
ALREADY_REDEEMED = "already_redeemed"
SUSPENDED = "suspended"
UNKNOWN_ID = "unknown_id"
ALREADY_GRANTED = "already_granted"


class DuplicateCoupon(ValueError):
    def __init__(self, coupon: bytes):
        super().__init__(f"coupon {coupon.hex()} is already registered")
        self.coupon = coupon


class PersistenceError(Exception):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"ledger line {lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class Accepted:
    credited: Money

    def to_wire(self) -> dict:
        return {"type": "accepted", "credited_udollars": self.credited}


@dataclass(frozen=True)
class Rejected:
    reason: str

    def to_wire(self) -> dict:
        return {"type": "rejected", "reason": self.reason}


@dataclass(frozen=True)
class Granted:
    key: CouponKey

    def to_wire(self) -> dict:
        return {"type": "granted", "key": self.key.hex()}


@dataclass(frozen=True)
class Refused:
    reason: str

    def to_wire(self) -> dict:
        return {"type": "refused", "reason": self.reason}


@dataclass(frozen=True)
class AbuseCaseResult:
    suspended: bool
    clawed_back: Money = 0
    redistributed: tuple[tuple[str, Money], ...] = ()

    def to_wire(self) -> dict:
        return {
            "type": "abuse_case",
            "suspended": self.suspended,
            "clawed_back_udollars": self.clawed_back,
            "redistributed": [[a, m] for a, m in self.redistributed],
        }


@dataclass(slots=True)
class LedgerEntry:
    coupon: bytes
    worth: Money
    vendor_id: str
    accessory_id: str
    accessory_type: str
    redeemed: bool = False
    redeemer_author: Optional[str] = None
    redeemed_at: Optional[int] = None
    user: Optional[str] = None
    credited: Money = 0
    fee: Money = 0
    clawed_back: bool = False


@dataclass
class AuthorAccount:
    author_id: str
    pending: Money = 0
    paid: Money = 0
    suspended: bool = False
    recovered: Money = 0
    # unsettled credits as (time, amount, accessory_type), oldest first
    credits: deque = field(default_factory=deque, repr=False)
    pending_by_type: dict = field(default_factory=lambda: defaultdict(int), repr=False)
    paid_by_type: dict = field(default_factory=lambda: defaultdict(int), repr=False)


@dataclass
class GrantRecord:
    secure_id: bytes
    key: CouponKey
    granted: bool = False
    granted_to: Optional[str] = None


@dataclass(frozen=True)
class FlatPerCoupon:
    service_fee_ppm: int = 0

    def __post_init__(self):
        if not 0 <= self.service_fee_ppm <= PPM:
            raise ValueError("service_fee_ppm must be within [0, 1_000_000]")

    def to_dict(self) -> dict:
        return {"kind": "flat", "service_fee_ppm": self.service_fee_ppm}


@dataclass(frozen=True)
class DecayingPerAuthor:
    schedule: tuple[Money, ...]
    tail: Money
    per_author_cap: Money
    global_balance: Money

    def __post_init__(self):
        sched = tuple(int(x) for x in self.schedule)
        object.__setattr__(self, "schedule", sched)
        if not sched:
            raise ValueError("decaying schedule must not be empty")
        if any(b >= a for a, b in zip(sched, sched[1:])):
            raise ValueError("decaying schedule must be strictly decreasing")
        if not 0 <= self.tail <= sched[-1]:
            raise ValueError("tail must be within [0, last schedule amount]")
        if self.per_author_cap < sched[0]:
            raise ValueError("per_author_cap must be at least the first schedule amount")
        if self.global_balance < 0:
            raise ValueError("global_balance must be >= 0")

    def to_dict(self) -> dict:
        return {
            "kind": "decaying",
            "schedule": list(self.schedule),
            "tail": self.tail,
            "per_author_cap": self.per_author_cap,
            "global_balance": self.global_balance,
        }


RewardPolicy = Union[FlatPerCoupon, DecayingPerAuthor]


def reward_policy_from_dict(d: dict) -> RewardPolicy:
    kind = d.get("kind")
    if kind == "flat":
        return FlatPerCoupon(int(d.get("service_fee_ppm", 0)))
    if kind == "decaying":
        return DecayingPerAuthor(tuple(d["schedule"]), int(d["tail"]),
                                 int(d["per_author_cap"]), int(d["global_balance"]))
    raise ValueError(f"unknown reward policy kind: {kind!r}")


@dataclass
class RewardState:
    ranks: dict = field(default_factory=lambda: defaultdict(int))
    author_totals: dict = field(default_factory=lambda: defaultdict(int))
    global_total: Money = 0


def apply_reward(policy: RewardPolicy, state: RewardState, author_id: str,
                 coupon_worth: Money) -> tuple[Money, Money]:
    """Return ``(credit, service_fee)`` for one accepted coupon and update ``state``."""
    if isinstance(policy, FlatPerCoupon):
        fee = coupon_worth * policy.service_fee_ppm // PPM
        credit = coupon_worth - fee
    else:
        rank = state.ranks[author_id]
        amount = policy.schedule[rank] if rank < len(policy.schedule) else policy.tail
        credit = max(0, min(amount,
                            policy.per_author_cap - state.author_totals[author_id],
                            policy.global_balance - state.global_total))
        fee = 0
    state.ranks[author_id] += 1
    state.author_totals[author_id] += credit
    state.global_total += credit
    return credit, fee


def split_proportionally(total: Money, weights: dict[str, Money]) -> list[tuple[str, Money]]:
    """Floor-split ``total`` by weight; leftover micro-dollars go to the largest share."""
    weights = {a: w for a, w in weights.items() if w > 0}
    if total <= 0 or not weights:
        return []
    denom = sum(weights.values())
    shares = {a: total * w // denom for a, w in weights.items()}
    leftover = total - sum(shares.values())
    if leftover:
        biggest = min(shares, key=lambda a: (-shares[a], a))
        shares[biggest] += leftover
    return sorted((a, m) for a, m in shares.items() if m > 0)


def _dumps(rec: dict) -> str:
    return json.dumps(rec, separators=(",", ":"))


class CashingServer:
    def __init__(self, credentials: Iterable[bytes] = (), *,
                 reward_policy: Optional[RewardPolicy] = None,
                 pseudonym_key: Optional[bytes] = None,
                 holding_period: int = 7 * 86400,
                 journal_file: Optional[IO[str]] = None):
        self._credentials = [bytes(c) for c in credentials]
        for c in self._credentials:
            if len(c) != 16:
                raise ValueError("manager credentials are 16 bytes")
        self.reward_policy = reward_policy or FlatPerCoupon()
        self.pseudonym_key = pseudonym_key if pseudonym_key is not None else os.urandom(16)
        self.holding_period = holding_period
        self._lock = threading.RLock()

        self.ledger: dict[bytes, LedgerEntry] = {}
        self.accounts: dict[str, AuthorAccount] = {}
        self.grants: dict[bytes, GrantRecord] = {}
        self.reward_state = RewardState()
        self.vendor_funding: dict[str, Money] = defaultdict(int)

        self.registered: Money = 0
        self.fees: Money = 0
        self.remainder: Money = 0  # signed, see totals()
        self.recovered: Money = 0
        self.redistributed: Money = 0
        self.clock = 0

        self._unredeemed_count: dict[str, int] = defaultdict(int)
        self._unredeemed_worth: dict[str, Money] = defaultdict(int)
        self._credit_by_author_accessory: dict[tuple[str, str], Money] = defaultdict(int)
        self._accessories_by_author: dict[str, set] = defaultdict(set)

        self.journal: list[str] = []
        self._journal_file = None
        self._append(_dumps({
            "rec": "header",
            "version": JOURNAL_VERSION,
            "pseudonym_key": self.pseudonym_key.hex(),
            "reward_policy": self.reward_policy.to_dict(),
            "holding_period": self.holding_period,
        }))
        if journal_file is not None:
            self.attach_journal(journal_file)

    # journal plumbing

    def attach_journal(self, fh: IO[str], backlog: bool = True) -> None:
        """Mirror the journal to ``fh``: the backlog now, then one flushed line per change."""
        with self._lock:
            if backlog:
                for line in self.journal:
                    fh.write(line + "\n")
                fh.flush()
            self._journal_file = fh

    def _append(self, line: str) -> None:
        self.journal.append(line)
        if self._journal_file is not None:
            self._journal_file.write(line + "\n")
            self._journal_file.flush()

    def _tick(self, now: Optional[int]) -> int:
        # server time never runs backwards, so credits stay in time order
        if now is not None and now > self.clock:
            self.clock = now
        return self.clock

    def pseudonym(self, user_id: str) -> str:
        digest = hmac.new(self.pseudonym_key, user_id.encode(), hashlib.sha256).hexdigest()
        return "u-" + digest[:16]

    def check_credential(self, credential: bytes) -> bool:
        ok = False
        for c in self._credentials:
            # no early exit: every configured credential is compared
            ok |= hmac.compare_digest(c, credential)
        return ok

    def add_credential(self, credential: bytes) -> None:
        with self._lock:
            self._credentials.append(bytes(credential))

    # factory side

    def register_batch(self, entries: Sequence[Sequence], grant_records: Sequence[GrantRecord] = ()) -> int:
        """Register ``(coupon, worth, vendor_id, accessory_id[, accessory_type])`` tuples.

        All-or-nothing: a duplicate coupon, in the ledger or inside the batch,
        registers nothing.
        """
        rows = []
        for e in entries:
            coupon, worth, vendor, accessory = e[:4]
            acc_type = e[4] if len(e) > 4 else vendor
            if worth < 0:
                raise ValueError("coupon worth must be >= 0")
            rows.append((bytes(coupon), int(worth), str(vendor), str(accessory), str(acc_type)))
        with self._lock:
            seen = set()
            for row in rows:
                if row[0] in self.ledger or row[0] in seen:
                    raise DuplicateCoupon(row[0])
                seen.add(row[0])
            sids = set()
            for g in grant_records:
                if g.secure_id in self.grants or g.secure_id in sids:
                    raise ValueError(f"secure id {g.secure_id.hex()} is already registered")
                sids.add(g.secure_id)
            if not rows and not grant_records:
                return 0
            self._apply_register(rows, [(g.secure_id, g.key) for g in grant_records])
            self._append(_dumps({
                "rec": "register",
                "entries": [[c.hex(), w, v, a, t] for c, w, v, a, t in rows],
                "grants": [[g.secure_id.hex(), g.key.hex()] for g in grant_records],
            }))
        return len(rows)

    def _apply_register(self, rows, grants) -> None:
        for coupon, worth, vendor, accessory, acc_type in rows:
            self.ledger[coupon] = LedgerEntry(coupon, worth, vendor, accessory, acc_type)
            self.registered += worth
            self.vendor_funding[vendor] += worth
            self._unredeemed_count[acc_type] += 1
            self._unredeemed_worth[acc_type] += worth
        for sid, key in grants:
            self.grants[sid] = GrantRecord(sid, key)

    # redemption

    def redeem(self, coupon: bytes, author_id: str, credential: bytes,
               user_pseudonym: str, now: Optional[int] = None) -> Union[Accepted, Rejected]:
        if not self.check_credential(credential):
            return Rejected(BAD_CREDENTIAL)
        with self._lock:
            entry = self.ledger.get(coupon)
            if entry is None:
                return Rejected(UNKNOWN_COUPON)
            if entry.redeemed:
                return Rejected(ALREADY_REDEEMED)
            acct = self.accounts.get(author_id)
            if acct is not None and acct.suspended:
                return Rejected(SUSPENDED)
            t = self._tick(now)
            user = self.pseudonym(user_pseudonym)
            credit, fee = self._apply_redeem(entry, author_id, user, t)
            self._append(_dumps({
                "rec": "redeem", "coupon": coupon.hex(), "author": author_id,
                "user": user, "now": t, "credited": credit, "fee": fee,
            }))
            return Accepted(credit)

    def _apply_redeem(self, entry: LedgerEntry, author_id: str, user: str, t: int) -> tuple[Money, Money]:
        credit, fee = apply_reward(self.reward_policy, self.reward_state, author_id, entry.worth)
        entry.redeemed = True
        entry.redeemer_author = author_id
        entry.redeemed_at = t
        entry.user = user
        entry.credited = credit
        entry.fee = fee
        self.fees += fee
        self.remainder += entry.worth - credit - fee
        self._unredeemed_count[entry.accessory_type] -= 1
        self._unredeemed_worth[entry.accessory_type] -= entry.worth
        self._credit(author_id, credit, entry.accessory_type, t)
        self._credit_by_author_accessory[(author_id, entry.accessory_id)] += credit
        self._accessories_by_author[author_id].add(entry.accessory_id)
        return credit, fee

    def _account(self, author_id: str) -> AuthorAccount:
        acct = self.accounts.get(author_id)
        if acct is None:
            acct = self.accounts[author_id] = AuthorAccount(author_id)
        return acct

    def _credit(self, author_id: str, amount: Money, acc_type: str, t: int) -> None:
        acct = self._account(author_id)
        acct.pending += amount
        acct.pending_by_type[acc_type] += amount
        if amount:
            acct.credits.append((t, amount, acc_type))

    # minimal accessories

    def grant_key(self, secure_id: bytes, credential: bytes,
                  manager_id: Optional[str] = None, now: Optional[int] = None) -> Union[Granted, Refused]:
        if not self.check_credential(credential):
            return Refused(BAD_CREDENTIAL)
        with self._lock:
            rec = self.grants.get(secure_id)
            if rec is None:
                return Refused(UNKNOWN_ID)
            if rec.granted:
                return Refused(ALREADY_GRANTED)
            t = self._tick(now)
            rec.granted = True
            rec.granted_to = manager_id
            self._append(_dumps({"rec": "grant", "secure_id": secure_id.hex(),
                                 "manager": manager_id, "now": t}))
            return Granted(rec.key)

    # payouts

    def settle(self, now: int, holding_period: Optional[int] = None) -> list[tuple[str, Money]]:
        hold = self.holding_period if holding_period is None else holding_period
        with self._lock:
            t = self._tick(now)
            moved = self._apply_settle(t, hold)
            self._append(_dumps({"rec": "settle", "now": t, "holding_period": hold}))
            return moved

    def _apply_settle(self, t: int, hold: int) -> list[tuple[str, Money]]:
        moved = []
        for author in sorted(self.accounts):
            acct = self.accounts[author]
            if acct.suspended:
                continue
            total = 0
            while acct.credits and t - acct.credits[0][0] >= hold:
                _, amount, acc_type = acct.credits.popleft()
                acct.pending -= amount
                acct.paid += amount
                acct.pending_by_type[acc_type] -= amount
                acct.paid_by_type[acc_type] += amount
                total += amount
            if total:
                moved.append((author, total))
        return moved

    def handle_abuse_report(self, accused_author: str, reporter_pseudonym: str,
                            now: Optional[int] = None) -> AbuseCaseResult:
        with self._lock:
            acct = self.accounts.get(accused_author)
            if acct is None:
                return AbuseCaseResult(suspended=False)
            if acct.suspended:
                return AbuseCaseResult(suspended=True)
            t = self._tick(now)
            reporter = self.pseudonym(reporter_pseudonym)
            result = self._apply_abuse(accused_author, t)
            self._append(_dumps({"rec": "abuse", "author": accused_author,
                                 "reporter": reporter, "now": t}))
            log.info("author %s suspended on report by %s: clawed back %d",
                     accused_author, reporter, result.clawed_back)
            return result

    def _apply_abuse(self, accused: str, t: int) -> AbuseCaseResult:
        acct = self.accounts[accused]
        acct.suspended = True
        clawed = acct.pending + acct.paid
        acct.recovered += clawed
        acct.pending = acct.paid = 0
        acct.credits.clear()
        acct.pending_by_type.clear()
        acct.paid_by_type.clear()
        self.recovered += clawed
        for entry in self.ledger.values() if clawed else ():
            if entry.redeemer_author == accused:
                entry.clawed_back = True

        accessories = self._accessories_by_author.get(accused, set())
        weights: dict[str, Money] = defaultdict(int)
        for (author, accessory), credit in self._credit_by_author_accessory.items():
            if author == accused or accessory not in accessories:
                continue
            other = self.accounts.get(author)
            if other is not None and not other.suspended:
                weights[author] += credit
        shares = split_proportionally(clawed, weights)
        for author, amount in shares:
            self._credit(author, amount, REDISTRIBUTION, t)
            self.redistributed += amount
        return AbuseCaseResult(True, clawed, tuple(shares))

    # reports

    def report_vendor(self, vendor_id: str) -> list[dict]:
        rows: dict[tuple[str, str], dict] = {}
        with self._lock:
            for e in self.ledger.values():
                if e.vendor_id != vendor_id or not e.redeemed:
                    continue
                row = rows.setdefault((e.accessory_type, e.redeemer_author), {
                    "accessory_type": e.accessory_type, "author": e.redeemer_author,
                    "coupons": 0, "credited": 0, "users": set(),
                })
                row["coupons"] += 1
                if not e.clawed_back:
                    row["credited"] += e.credited
                row["users"].add(e.user)
        out = []
        for key in sorted(rows):
            row = rows[key]
            row["users"] = len(row["users"])
            out.append(row)
        return out

    def report_author(self, author_id: str) -> dict:
        with self._lock:
            acct = self.accounts.get(author_id)
            coupons: dict[str, int] = defaultdict(int)
            for e in self.ledger.values():
                if e.redeemer_author == author_id:
                    coupons[e.accessory_type] += 1
            rows = []
            if acct is not None:
                types = set(coupons) | set(acct.pending_by_type) | set(acct.paid_by_type)
                for t in sorted(types):
                    pending = acct.pending_by_type.get(t, 0)
                    paid = acct.paid_by_type.get(t, 0)
                    if coupons.get(t, 0) or pending or paid:
                        rows.append({"accessory_type": t, "coupons": coupons.get(t, 0),
                                     "pending": pending, "paid": paid})
            return {
                "author": author_id,
                "rows": rows,
                "pending": acct.pending if acct else 0,
                "paid": acct.paid if acct else 0,
                "recovered": acct.recovered if acct else 0,
                "suspended": acct.suspended if acct else False,
            }

    def report_unredeemed(self) -> list[dict]:
        with self._lock:
            return [{"accessory_type": t, "coupons": self._unredeemed_count[t],
                     "worth": self._unredeemed_worth[t]}
                    for t in sorted(self._unredeemed_count, key=lambda t: (-self._unredeemed_worth[t], t))
                    if self._unredeemed_count[t]]

    def popular_apps(self, accessory_type: str) -> list[dict]:
        users: dict[str, set] = defaultdict(set)
        with self._lock:
            for e in self.ledger.values():
                if e.redeemed and e.accessory_type == accessory_type:
                    users[e.redeemer_author].add(e.user)
            # a suspended author is not something to recommend
            for author in [a for a in users if self.accounts[a].suspended]:
                del users[author]
        ranked = sorted(users, key=lambda a: (-len(users[a]), a))
        return [{"rank": i + 1, "author": a, "users": len(users[a])} for i, a in enumerate(ranked)]

    def totals(self) -> dict[str, Money]:
        """Money buckets of the conservation identity.

        ``remainder`` is redeemed worth not paid out as credit or fee.  It is
        negative while a decaying reward policy pays credits ahead of the
        (smaller) worth of the coupons that triggered them.
        """
        with self._lock:
            return {
                "registered": self.registered,
                "credited": sum(a.pending + a.paid for a in self.accounts.values()),
                "fees": self.fees,
                "unredeemed": sum(e.worth for e in self.ledger.values() if not e.redeemed),
                "remainder": self.remainder,
                "recovered": self.recovered,
                "redistributed": self.redistributed,
            }

    # persistence

    def persist(self, store: Union[str, os.PathLike, IO[str]]) -> None:
        with self._lock:
            if hasattr(store, "write"):
                for line in self.journal:
                    store.write(line + "\n")
                return
            tmp = f"{os.fspath(store)}.tmp"
            with open(tmp, "w", encoding="utf-8") as fh:
                for line in self.journal:
                    fh.write(line + "\n")
            os.replace(tmp, store)

    @classmethod
    def restore(cls, store: Union[str, os.PathLike, IO[str]], credentials: Iterable[bytes] = ()) -> CashingServer:
        if hasattr(store, "read"):
            return cls._replay(store, credentials)
        with open(store, encoding="utf-8") as fh:
            return cls._replay(fh, credentials)

    @classmethod
    def _replay(cls, lines: Iterable[str], credentials) -> CashingServer:
        server = None
        for lineno, raw in enumerate(lines, 1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
                if not isinstance(rec, dict):
                    raise ValueError("record is not an object")
                kind = rec["rec"]
                if server is None:
                    if kind != "header":
                        raise ValueError("first record must be the header")
                    if rec["version"] != JOURNAL_VERSION:
                        raise ValueError(f"unsupported journal version {rec['version']}")
                    server = cls(credentials,
                                 reward_policy=reward_policy_from_dict(rec["reward_policy"]),
                                 pseudonym_key=bytes.fromhex(rec["pseudonym_key"]),
                                 holding_period=int(rec["holding_period"]))
                    continue
                server._replay_record(kind, rec)
            except PersistenceError:
                raise
            except (ValueError, KeyError, TypeError, IndexError) as e:
                raise PersistenceError(lineno, f"{type(e).__name__}: {e}") from None
            server.journal.append(raw.rstrip("\n"))
        if server is None:
            raise PersistenceError(0, "empty ledger file")
        return server

    def _replay_record(self, kind: str, rec: dict) -> None:
        if kind == "register":
            rows = []
            for c, w, v, a, t in rec["entries"]:
                coupon = decode_coupon(c)
                if coupon in self.ledger:
                    raise ValueError(f"duplicate coupon {c}")
                if not isinstance(w, int) or w < 0:
                    raise ValueError(f"bad worth {w!r}")
                rows.append((coupon, w, v, a, t))
            grants = [(decode_coupon(s), CouponKey.from_hex(k)) for s, k in rec["grants"]]
            self._apply_register(rows, grants)
        elif kind == "redeem":
            entry = self.ledger.get(decode_coupon(rec["coupon"]))
            if entry is None or entry.redeemed:
                raise ValueError(f"redeem of unknown or spent coupon {rec['coupon']}")
            t = self._tick(int(rec["now"]))
            credit, fee = self._apply_redeem(entry, rec["author"], rec["user"], t)
            if (credit, fee) != (rec["credited"], rec["fee"]):
                raise ValueError(f"credited {rec['credited']}/{rec['fee']} but policy gives {credit}/{fee}")
        elif kind == "grant":
            g = self.grants.get(decode_coupon(rec["secure_id"]))
            if g is None or g.granted:
                raise ValueError(f"grant of unknown or granted id {rec['secure_id']}")
            self._tick(int(rec["now"]))
            g.granted = True
            g.granted_to = rec["manager"]
        elif kind == "settle":
            self._apply_settle(self._tick(int(rec["now"])), int(rec["holding_period"]))
        elif kind == "abuse":
            if rec["author"] not in self.accounts or self.accounts[rec["author"]].suspended:
                raise ValueError(f"abuse record for unknown or suspended author {rec['author']}")
            self._apply_abuse(rec["author"], self._tick(int(rec["now"])))
        else:
            raise ValueError(f"unknown record type {kind!r}")


def conservation_gap(totals: dict[str, Money]) -> Money:
    """Zero exactly when registered worth is fully accounted for."""
    return totals["registered"] - (
        totals["credited"] + totals["fees"] + totals["unredeemed"] + totals["remainder"]
        + totals["recovered"] - totals["redistributed"])
