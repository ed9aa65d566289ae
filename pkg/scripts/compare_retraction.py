#!/usr/bin/env python3
"""DRFGT against the QR-retraction baseline from the same start, as a small table."""

import argparse
import json
import sys
from contextlib import redirect_stdout
from io import StringIO
from pathlib import Path

from stiefel_dgt.cli import main


def parse_args():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--preset", default="desk-pca")
    p.add_argument("--config", help="INI file instead of a preset")
    p.add_argument("--out", default="runs/compare")
    p.add_argument("--algorithms", default="drfgt,retraction_dgt")
    return p.parse_args()


if __name__ == "__main__":
    args = parse_args()
    source = ["--config", args.config] if args.config else ["--preset", args.preset]
    with redirect_stdout(StringIO()):
        code = main(["compare", *source, "--algorithms", args.algorithms, "--out", args.out])
    if code not in (0, 3):
        sys.exit(code)
    runs = json.loads((Path(args.out) / "comparison.json").read_text())["runs"]
    cols = ("exit_reason", "iterations", "qr_svd_count", "wall_time_s", "final_feasibility_xbar", "final_landing_norm_avg")
    print(f"{'algorithm':<22}" + "".join(f"{c:>24}" for c in cols))
    for name, row in runs.items():
        cells = [f"{row[c]:.3e}" if isinstance(row[c], float) else str(row[c]) for c in cols]
        print(f"{name:<22}" + "".join(f"{c:>24}" for c in cells))
    sys.exit(code)
