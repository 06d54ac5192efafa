"""Command line entry point: validate, enumerate, run, sweep, analyze."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

from . import assignment
from .scenario import (
    ConfigError,
    InvariantBreach,
    Unsupported,
    config_schema,
    enumerate_combinations,
    load_config,
    run,
    sweep,
    validate_config,
)

EXIT_OK, EXIT_INVALID, EXIT_BREACH, EXIT_UNSUPPORTED = 0, 1, 2, 3


def _load(path: str):
    return load_config(Path(path).read_text())


def _cmd_validate(args) -> int:
    if args.schema:
        print(json.dumps(config_schema(), indent=2, sort_keys=True))
        return EXIT_OK
    try:
        cfg = _load(args.config)
    except ConfigError as e:
        print(f"invalid: {e}")
        return EXIT_INVALID
    viol = validate_config(cfg)
    if not viol:
        print("ok")
        return EXIT_OK
    for v in viol:
        print(f"violation: {v}")
    return EXIT_INVALID


def _cmd_enumerate(args) -> int:
    restrict = {}
    for item in args.restrict or []:
        tree, _, leaves = item.partition("=")
        restrict[tree] = [x for x in leaves.split(",") if x]
    count, combos = enumerate_combinations(restrict)
    if args.list:
        for c in combos:
            print(json.dumps(c, sort_keys=True))
    print(count)
    return EXIT_OK


def _cmd_run(args) -> int:
    try:
        cfg = _load(args.config)
    except ConfigError as e:
        print(f"invalid: {e}", file=sys.stderr)
        return EXIT_INVALID
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    try:
        res = run(cfg, args.seed)
    except ConfigError as e:
        print(f"invalid: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Unsupported as e:
        print(f"unsupported: {e}", file=sys.stderr)
        return EXIT_UNSUPPORTED
    except InvariantBreach as e:
        print(f"invariant breach: {e}", file=sys.stderr)
        if out:
            (out / "reproducer.json").write_text(json.dumps(e.bundle, indent=2, sort_keys=True, default=str))
        return EXIT_BREACH
    report = res.report.to_json()
    if out:
        (out / "report.json").write_bytes(report)
        (out / "events.jsonl").write_bytes(res.events_jsonl())
        (out / "accounts.csv").write_text(res.accounts.to_csv())
        row = res.report.summary_row()
        (out / "summary.csv").write_text(",".join(row) + "\n" + ",".join(str(v) for v in row.values()) + "\n")
    sys.stdout.write(report.decode())
    return EXIT_OK


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _cmd_sweep(args) -> int:
    try:
        cfg = _load(args.config)
    except ConfigError as e:
        print(f"invalid: {e}", file=sys.stderr)
        return EXIT_INVALID
    values = [_parse_value(v) for v in args.values.split(",") if v != ""]
    text = sweep(cfg, args.axis, values, args.seed)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_analyze(args) -> int:
    rho, q0 = Fraction(args.rho), Fraction(args.q0)
    rows = []
    b = assignment.binomial_failure(args.u, rho, q0)
    rows.append(("binomial", b, None))
    if args.n is not None:
        rows.append(("hypergeometric", assignment.hypergeometric_failure(args.n, args.u, rho, q0), None))
        if args.trials:
            est = assignment.epoch_failure_monte_carlo(args.n, args.m, args.u, rho, q0, args.trials, args.seed)
            rows.append(("montecarlo", est.p, est))
    if args.json:
        out = {"u": args.u, "rho": str(rho), "q0": str(q0)}
        for model, p, est in rows:
            if est is None:
                out[model] = {"exact": str(p), "value": float(p)}
            else:
                out["monte_carlo"] = {"m": args.m, "p": est.p, "ci95": [est.lo, est.hi], "trials": est.trials}
        print(json.dumps(out, indent=2, sort_keys=True))
        return EXIT_OK
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["n", "m", "u", "rho", "Q0", "model", "probability"])
    for model, p, est in rows:
        m = args.m if est is not None else 1
        w.writerow(["" if args.n is None else args.n, m, args.u, str(rho), str(q0), model, repr(float(p))])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shardsim", description="Sharding blockchain simulator")
    sub = p.add_subparsers(dest="cmd", required=True)

    v = sub.add_parser("validate", help="check a config against the schema and composition rules")
    v.add_argument("config", nargs="?")
    v.add_argument("--schema", action="store_true", help="print the config JSON schema and exit")
    v.set_defaults(func=_cmd_validate)

    e = sub.add_parser("enumerate", help="count taxonomy combinations")
    e.add_argument("--restrict", action="append", metavar="TREE=LEAF[,LEAF]")
    e.add_argument("--list", action="store_true")
    e.set_defaults(func=_cmd_enumerate)

    r = sub.add_parser("run", help="execute one scenario")
    r.add_argument("config")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", help="directory for report.json, events.jsonl, summary.csv, accounts.csv")
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("sweep", help="one run per value of a config field, CSV out")
    s.add_argument("config")
    s.add_argument("--axis", required=True)
    s.add_argument("--values", required=True, help="comma separated, JSON literals")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out")
    s.set_defaults(func=_cmd_sweep)

    a = sub.add_parser("analyze", help="committee failure calculator (CSV out)")
    a.add_argument("--u", type=int, required=True)
    a.add_argument("--rho", required=True, help="fraction, e.g. 1/4 or 0.25")
    a.add_argument("--q0", required=True)
    a.add_argument("--n", type=int)
    a.add_argument("--m", type=int, default=1)
    a.add_argument("--trials", type=int, default=0)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--json", action="store_true", help="JSON with exact fractions instead of CSV")
    a.set_defaults(func=_cmd_analyze)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.cmd == "validate" and not args.schema and not args.config:
        print("validate needs a config path or --schema", file=sys.stderr)
        return EXIT_INVALID
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
