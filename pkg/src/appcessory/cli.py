"""Command line entry points: provision, serve, simulate, report."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import random
import signal
import sys
from typing import Optional

from .accessory import COUNTER_MODE, MINIMAL_MODE, MODES, RANDOM_MODE, parse_policy
from .coupon import CouponKey, check_coupon_max, decode_hex16, derive_range
from .server import (CashingServer, DuplicateCoupon, FlatPerCoupon, GrantRecord, PersistenceError,
                     reward_policy_from_dict)
from .wire import TransportError, WireClient, WireServer, parse_addr

log = logging.getLogger("appcessory")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_VALIDATION = 2
EXIT_PROTOCOL = 3
EXIT_CORRUPT = 4

_MODE_ALIASES = {"counter": COUNTER_MODE, "random": RANDOM_MODE, "minimal": MINIMAL_MODE}


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _mode(text: str) -> str:
    mode = _MODE_ALIASES.get(text, text)
    if mode not in MODES:
        raise argparse.ArgumentTypeError(f"mode must be one of counter, random, minimal")
    return mode


def _hex16(text: str) -> bytes:
    try:
        return decode_hex16(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def _tsv(rows: list[dict], columns: list[str]) -> str:
    lines = ["\t".join(columns)]
    lines += ["\t".join(str(r[c]) for c in columns) for r in rows]
    return "\n".join(lines) + "\n"


# provision

PROVISION_FIELDS = ("accessory_id", "vendor_id", "accessory_type", "mode", "coupon_key", "coupon_max",
                    "worth_udollars", "policy", "secure_id", "retail_udollars")


def provision_records(units: int, coupons: int, worth: int, mode: str, policy: str, seed: int,
                      vendor: str, accessory_type: str, retail: int) -> list[dict]:
    rng = random.Random(seed)
    keys, ids, records = set(), set(), []
    for i in range(units):
        key = rng.randbytes(16)
        # a repeat would let two units mint the same coupons; redraw
        while key in keys:
            key = rng.randbytes(16)
        keys.add(key)
        secure_id = None
        if mode == MINIMAL_MODE:
            secure_id = rng.randbytes(16)
            while secure_id in ids:
                secure_id = rng.randbytes(16)
            ids.add(secure_id)
        records.append(dict(zip(PROVISION_FIELDS, (
            f"{vendor}-{i:06d}", vendor, accessory_type, mode, key.hex(), coupons, worth, policy,
            secure_id.hex() if secure_id else None, retail))))
    return records


def cmd_provision(args) -> int:
    try:
        check_coupon_max(args.coupons)
        policy = parse_policy(args.policy)
    except (TypeError, ValueError) as e:
        raise CliError(EXIT_VALIDATION, str(e))
    if args.units < 0 or args.worth_udollars < 0:
        raise CliError(EXIT_VALIDATION, "--units and --worth-udollars must be >= 0")
    total = policy.total()
    if total is not None and total > args.coupons:
        raise CliError(EXIT_VALIDATION, f"policy schedules {total} coupons, more than --coupons {args.coupons}")
    retail = args.retail_udollars
    if not args.allow_overvalued and args.coupons * args.worth_udollars > retail:
        raise CliError(EXIT_VALIDATION,
                       f"coupons per unit worth {args.coupons * args.worth_udollars} udollars exceed "
                       f"retail price {retail} (pass --allow-overvalued to permit)")
    if args.server is None and args.ledger is None:
        raise CliError(EXIT_VALIDATION, "give --server ADDR or --ledger FILE to register the coupons")

    records = provision_records(args.units, args.coupons, args.worth_udollars, args.mode, policy.describe(),
                                args.seed, args.vendor, args.type, retail)

    def unit_batch(rec):
        key = CouponKey.from_hex(rec["coupon_key"])
        entries = [(c, rec["worth_udollars"], rec["vendor_id"], rec["accessory_id"], rec["accessory_type"])
                   for c in derive_range(key, 0, rec["coupon_max"])]
        grants = [GrantRecord(bytes.fromhex(rec["secure_id"]), key)] if rec["secure_id"] else []
        return entries, grants

    registered = 0
    if args.ledger is not None:
        # a fresh ledger's pseudonym key comes from the seed so the file is reproducible
        pkey = hashlib.sha256(f"{args.seed}/pseudonym".encode()).digest()[:16]
        server = _open_ledger(args.ledger, create=True, pseudonym_key=pkey)
        # the file is only replaced once every unit is in, so a failure leaves it untouched
        for rec in records:
            entries, grants = unit_batch(rec)
            try:
                server.register_batch(entries, grants)
            except DuplicateCoupon as e:
                raise CliError(EXIT_PROTOCOL, f"server rejected {rec['accessory_id']}: "
                                              f"duplicate coupon {e.coupon.hex()}")
            except ValueError as e:
                raise CliError(EXIT_PROTOCOL, f"server rejected {rec['accessory_id']}: {e}")
            registered += sum(e[1] for e in entries)
        server.persist(args.ledger)
    else:
        with WireClient(args.server) as client:
            for rec in records:
                entries, grants = unit_batch(rec)
                req = {"type": "register",
                       "entries": [[c.hex(), w, v, a, t] for c, w, v, a, t in entries],
                       "grants": [[g.secure_id.hex(), g.key.hex()] for g in grants]}
                if args.admin_credential is not None:
                    req["credential"] = args.admin_credential.hex()
                try:
                    resp = client.request(req)
                except TransportError as e:
                    raise CliError(EXIT_PROTOCOL, str(e))
                if resp.get("type") != "registered":
                    detail = resp.get("detail") or resp.get("reason")
                    raise CliError(EXIT_PROTOCOL, f"server rejected {rec['accessory_id']}: "
                                                  f"{resp.get('reason')} {detail}")
                registered += sum(e[1] for e in entries)

    tmp = args.out + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    os.replace(tmp, args.out)
    print(f"units\t{len(records)}")
    print(f"coupons\t{len(records) * args.coupons}")
    print(f"registered_udollars\t{registered}")
    return EXIT_OK


# serve

def _open_ledger(path: str, create: bool = False, credentials=(), policy=None,
                 holding_period: Optional[int] = None, pseudonym_key: Optional[bytes] = None) -> CashingServer:
    if os.path.exists(path) and os.path.getsize(path) > 0:
        try:
            return CashingServer.restore(path, credentials)
        except PersistenceError as e:
            raise CliError(EXIT_CORRUPT, f"{path}: {e}")
    if not create:
        raise CliError(EXIT_FAILURE, f"{path}: no such ledger")
    kwargs = {}
    if holding_period is not None:
        kwargs["holding_period"] = holding_period
    return CashingServer(credentials, reward_policy=policy, pseudonym_key=pseudonym_key, **kwargs)


def cmd_serve(args) -> int:
    policy = FlatPerCoupon(args.service_fee_ppm)
    if args.reward_policy:
        try:
            policy = reward_policy_from_dict(json.loads(args.reward_policy))
        except (ValueError, KeyError, TypeError) as e:
            raise CliError(EXIT_VALIDATION, f"--reward-policy: {e}")
    fresh = not (os.path.exists(args.ledger) and os.path.getsize(args.ledger) > 0)
    server = _open_ledger(args.ledger, create=True, credentials=args.credential, policy=policy,
                          holding_period=args.holding_period, pseudonym_key=args.pseudonym_key)
    if not fresh and server.holding_period != args.holding_period:
        log.warning("ledger holding period %d overrides --holding-period %d",
                    server.holding_period, args.holding_period)
    journal = open(args.ledger, "a", encoding="utf-8")
    server.attach_journal(journal, backlog=fresh)
    try:
        wire = WireServer(server, parse_addr(args.listen), admin_credential=args.admin_credential)
    except OSError as e:
        raise CliError(EXIT_FAILURE, f"cannot listen on {args.listen}: {e}")

    def stop(signum, frame):
        raise KeyboardInterrupt

    signal.signal(signal.SIGTERM, stop)
    print(f"listening on {wire.address}", flush=True)
    try:
        wire.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        wire.server_close()
        journal.flush()
        os.fsync(journal.fileno())
        journal.close()
    return EXIT_OK


# simulate

def cmd_simulate(args) -> int:
    from . import sim

    try:
        scenario = sim.Scenario.load(args.scenario)
    except sim.ScenarioError as e:
        raise CliError(EXIT_VALIDATION, str(e))
    except OSError as e:
        raise CliError(EXIT_FAILURE, str(e))

    if args.verify:
        return _verify_outputs(scenario, args.verify)

    result = sim.run(scenario)
    os.makedirs(args.out, exist_ok=True)
    files = result.files()
    files["scenario.json"] = scenario.canonical_json() + "\n"
    for name, text in files.items():
        with open(os.path.join(args.out, name), "w", encoding="utf-8") as fh:
            fh.write(text)
    if not args.no_figures:
        from .plots import plot_author_earnings, plot_emissions
        plot_author_earnings(result.events, os.path.join(args.out, "earnings.png"))
        plot_emissions(result.events, os.path.join(args.out, "emissions.png"))

    ok, rows = sim.metrics(result)
    print(_tsv([dict(zip(("check", "expected", "observed"), r)) for r in rows], ["check", "expected", "observed"]),
          end="")
    if args.check_conservation and not ok:
        print("conservation check FAILED", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def _verify_outputs(scenario, out_dir: str) -> int:
    from . import sim

    try:
        with open(os.path.join(out_dir, "events.jsonl"), encoding="utf-8") as fh:
            events = [json.loads(line) for line in fh if line.strip()]
        with open(os.path.join(out_dir, "metrics.tsv"), encoding="utf-8") as fh:
            metrics = sim.parse_metrics(fh.read())
        ok, rows = sim.verify(scenario, events, metrics)
    except (OSError, ValueError, KeyError) as e:
        print(f"cannot verify {out_dir}: {e}", file=sys.stderr)
        return EXIT_FAILURE
    for check, expected, observed in rows:
        if expected != observed:
            print(f"{check}\texpected {expected}\tobserved {observed}", file=sys.stderr)
    print("conservation ok" if ok else "conservation FAILED")
    return EXIT_OK if ok else EXIT_FAILURE


# report

REPORT_COLUMNS = {
    "vendor": ["accessory_type", "author", "coupons", "credited", "users"],
    "author": ["accessory_type", "coupons", "pending", "paid"],
    "unredeemed": ["accessory_type", "coupons", "worth"],
    "popular": ["rank", "author", "users"],
}


def cmd_report(args) -> int:
    if args.ledger:
        server = _open_ledger(args.ledger)
        if args.vendor is not None:
            kind, rows = "vendor", server.report_vendor(args.vendor)
        elif args.author is not None:
            kind, rep = "author", server.report_author(args.author)
        elif args.unredeemed:
            kind, rows = "unredeemed", server.report_unredeemed()
        else:
            kind, rows = "popular", server.popular_apps(args.popular)
    else:
        if args.vendor is not None:
            kind, req = "vendor", {"type": "report_vendor", "vendor": args.vendor}
        elif args.author is not None:
            kind, req = "author", {"type": "report_author", "author": args.author}
        elif args.unredeemed:
            kind, req = "unredeemed", {"type": "report_unredeemed"}
        else:
            kind, req = "popular", {"type": "popular_apps", "accessory_type": args.popular}
        try:
            with WireClient(args.server) as client:
                resp = client.request(req)
        except TransportError as e:
            raise CliError(EXIT_PROTOCOL, str(e))
        if resp.get("type") != "report":
            raise CliError(EXIT_PROTOCOL, f"server answered {resp}")
        rows = resp.get("rows", [])
        rep = resp
    if kind == "author":
        rows = rep["rows"]
    sys.stdout.write(_tsv(rows, REPORT_COLUMNS[kind]))
    if kind == "author":
        # the live balance view
        for key in ("pending", "paid", "recovered", "suspended"):
            sys.stdout.write(f"# {key}\t{rep[key]}\n")
    if args.plot:
        from .plots import plot_table
        if kind == "vendor":
            plot_table(rows, ("accessory_type", "author"), "credited", args.plot, f"vendor {args.vendor}", money=True)
        elif kind == "author":
            plot_table([dict(r, total=r["pending"] + r["paid"]) for r in rows], ("accessory_type",), "total",
                       args.plot, f"author {args.author}", money=True)
        elif kind == "unredeemed":
            plot_table(rows, ("accessory_type",), "worth", args.plot, "unredeemed coupons", money=True)
        else:
            plot_table(rows, ("author",), "users", args.plot, f"popular apps for {args.popular}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="appcessory", description="Accessory coupon micropayments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("provision", help="generate accessory keys and register their coupons")
    pr.add_argument("--units", type=int, required=True)
    pr.add_argument("--coupons", type=int, required=True, help="coupons per unit (coupon max)")
    pr.add_argument("--worth-udollars", type=int, required=True)
    pr.add_argument("--mode", type=_mode, default=COUNTER_MODE)
    pr.add_argument("--policy", default="interval:60", help="interval:SECS or phased:COUNTxSECS,...")
    pr.add_argument("--seed", type=int, required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--server", help="HOST:PORT of a running server")
    pr.add_argument("--ledger", help="register straight into this ledger file instead of a server")
    pr.add_argument("--vendor", default="vendor")
    pr.add_argument("--type", default="accessory", help="accessory type used in reports")
    pr.add_argument("--retail-udollars", type=int, required=True)
    pr.add_argument("--allow-overvalued", action="store_true")
    pr.add_argument("--admin-credential", type=_hex16)
    pr.set_defaults(func=cmd_provision)

    sv = sub.add_parser("serve", help="run the cashing server")
    sv.add_argument("--listen", default="127.0.0.1:7878")
    sv.add_argument("--ledger", required=True)
    sv.add_argument("--credential", type=_hex16, action="append", default=[],
                    help="manager credential (32 hex); repeatable")
    sv.add_argument("--holding-period", type=int, default=7 * 86400)
    sv.add_argument("--service-fee-ppm", type=int, default=0)
    sv.add_argument("--reward-policy", help="reward policy as JSON; overrides --service-fee-ppm")
    sv.add_argument("--admin-credential", type=_hex16)
    sv.add_argument("--pseudonym-key", type=_hex16,
                    help="key for user pseudonyms in a new ledger (default: random)")
    sv.set_defaults(func=cmd_serve)

    sm = sub.add_parser("simulate", help="run a scenario file")
    sm.add_argument("--scenario", required=True)
    sm.add_argument("--out", default="sim-out")
    sm.add_argument("--check-conservation", action="store_true")
    sm.add_argument("--no-figures", action="store_true")
    sm.add_argument("--verify", metavar="DIR", help="re-check a previous run's outputs instead of running")
    sm.set_defaults(func=cmd_simulate)

    rp = sub.add_parser("report", help="print a report table")
    src = rp.add_mutually_exclusive_group(required=True)
    src.add_argument("--ledger")
    src.add_argument("--server")
    what = rp.add_mutually_exclusive_group(required=True)
    what.add_argument("--vendor")
    what.add_argument("--author")
    what.add_argument("--unredeemed", action="store_true")
    what.add_argument("--popular", metavar="TYPE")
    rp.add_argument("--plot", metavar="PNG", help="also render the table as a bar chart")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_VALIDATION if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
