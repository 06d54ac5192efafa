#!/usr/bin/env python3
"""Sweep the corrupted fraction over the Omniledger-like config and write CSV.

Example: python scripts/sweep_rho.py --values 0,0.1,0.2,0.3 --out rho.csv
"""
import argparse
import sys
from pathlib import Path

from shardsim.scenario import load_config, omniledger_like, sweep

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="YAML config; defaults to the Omniledger-like template")
    ap.add_argument("--values", default="0,0.1,0.2,0.3")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out")
    args = ap.parse_args()
    cfg = load_config(Path(args.config).read_text()) if args.config else omniledger_like(corruption_speed="immediate")
    text = sweep(cfg, "rho", [float(v) for v in args.values.split(",")], args.seed)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
