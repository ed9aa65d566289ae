#!/usr/bin/env python3
"""Run DRFGT on the desk-scale PCA preset and print the summary."""

import argparse
import json
import sys
from pathlib import Path

from stiefel_dgt.cli import main


def parse_args():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/desk-pca")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--audit", action="store_true", help="store snapshots and audit them along the way")
    return p.parse_args()


if __name__ == "__main__":
    args = parse_args()
    argv = ["run", "--preset", "desk-pca", "--seed", str(args.seed), "--out", args.out]
    if args.audit:
        argv.append("--audit")
    code = main(argv)
    summary = json.loads((Path(args.out) / "summary.json").read_text())
    print(json.dumps({k: summary[k] for k in ("exit_reason", "iterations", "feasibility_xbar", "final")}, indent=2))
    sys.exit(code)
