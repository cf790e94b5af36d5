"""Command line front end.

    rmastore run scenario.json [--trace out.jsonl] [--audit out.jsonl]
    rmastore check-2pc [--max-p N] [--max-r N] [--keys N] [--disable-log]
    rmastore bench [--sizes L] [--replicas L] [--ping on|off]
                   [--mode normal|cas] [--ops N] [--csv out.csv]

Global flags: --seed N (override), --fidelity spec|real-osc, -v.
Exit codes: 0 everything held, 1 an assertion failed, 2 usage or parse error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys

from . import harness
from .scenario import ScenarioError

log = logging.getLogger("rmastore")

BENCH_COLUMNS = ["mode", "ping", "replicas", "size", "ops",
                 "msgs", "bytes", "flushes", "pings", "measured", "model"]


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated int list: {text!r}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="rmastore",
        description="replicated in-memory KV store on a simulated "
                    "one-sided transport: scenario runner and checkers")
    ap.add_argument("--seed", type=int, default=None,
                    help="override the scenario seed / checker seed")
    ap.add_argument("--fidelity", choices=("spec", "real-osc"), default=None,
                    help="failure reporting fidelity of the transport")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario file and check its "
                                   "expectations")
    p.add_argument("scenario", help="path to a scenario JSON file")
    p.add_argument("--trace", metavar="PATH",
                   help="write the transport event trace (one JSON per line)")
    p.add_argument("--audit", metavar="PATH",
                   help="write the final per-key audit (one JSON per line)")

    p = sub.add_parser("check-2pc", help="exhaustive single-failure "
                                         "injection over the 2PC protocol")
    p.add_argument("--max-p", type=int, default=5)
    p.add_argument("--max-r", type=int, default=2)
    p.add_argument("--keys", type=int, default=3)
    p.add_argument("--disable-log", action="store_true",
                   help="negative control: skip backup logging and watch "
                        "the checker catch double execution")

    p = sub.add_parser("bench", help="replicated put cost under the affine "
                                     "cost model")
    p.add_argument("--sizes", type=_int_list, default=[64, 1024])
    p.add_argument("--replicas", type=_int_list, default=[1, 2, 6])
    p.add_argument("--ping", choices=("on", "off"), default="on")
    p.add_argument("--mode", choices=("normal", "cas"), default="normal")
    p.add_argument("--ops", type=int, default=16)
    p.add_argument("--csv", metavar="PATH", help="write the table as CSV")
    return ap


def cmd_run(args) -> int:
    code, report = harness.run_scenario(
        args.scenario, trace_path=args.trace, audit_path=args.audit,
        seed=args.seed, fidelity=args.fidelity)
    for name, ok, detail in report["checks"]:
        line = f"{'ok  ' if ok else 'FAIL'} {name}"
        if detail and not ok:
            line += f": {detail}"
        print(line)
    print(f"{len(report['ops'])} ops, {report['rounds']} recovery rounds, "
          f"{report['hangs']} hangs")
    return code


def cmd_check_2pc(args) -> int:
    report = harness.check_2pc(
        max_p=args.max_p, max_r=args.max_r, max_keys=args.keys,
        log_disabled=args.disable_log, seed=args.seed or 0)
    for world in report["worlds"]:
        print(f"P={world['procs']} R={world['replicas']} "
              f"B={world['backups']}: kill window {world['window']}")
    print(f"{report['runs']} runs, {len(report['violations'])} violations, "
          f"{report['exhausted']} coordinator-exhausted, "
          f"{report['aborted_dropped']} aborted on a dropped guard")
    for v in report["violations"]:
        print(f"  violation: P={v['procs']} R={v['replicas']} "
              f"B={v['backups']} kill rank {v['victim']} at step {v['step']} "
              f"-> outcome {v['outcome']}: {', '.join(v['problems'])}")
    return 1 if report["violations"] else 0


def cmd_bench(args) -> int:
    rows = harness.bench_put(
        sizes=args.sizes, replica_counts=args.replicas, mode=args.mode,
        ping=args.ping == "on", ops=args.ops, seed=args.seed or 0)
    widths = {c: max(len(c), 10) for c in BENCH_COLUMNS}
    print("  ".join(c.rjust(widths[c]) for c in BENCH_COLUMNS))
    for row in rows:
        print("  ".join(str(row[c]).rjust(widths[c]) for c in BENCH_COLUMNS))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
            writer.writeheader()
            writer.writerows({c: row[c] for c in BENCH_COLUMNS}
                             for row in rows)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "check-2pc":
            return cmd_check_2pc(args)
        return cmd_bench(args)
    except ScenarioError as exc:
        log.error("%s", exc)
        return 2
    except ValueError as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
