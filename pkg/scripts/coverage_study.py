#!/usr/bin/env python3
"""Replicate coverage comparison between the robust and plain methods.

Runs the well-specified Gaussian coverage config for both methods (the
config's `method` field is overridden) and prints the per-level coverage
table. Parallelize across replicates with --workers or RSNL_WORKERS.

Usage: python scripts/coverage_study.py [--c 100] [--workers N] [--out DIR]
"""

import argparse
import csv
import sys
import tempfile
from pathlib import Path

from rsnl.cli import cmd_coverage


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--c", type=int, default=100)
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--out", default="runs/coverage_comparison")
    parser.add_argument(
        "--config",
        default=Path(__file__).resolve().parent.parent / "configs" / "well_specified_coverage.yaml",
    )
    args = parser.parse_args()

    base = Path(args.config).read_text()
    results = {}
    for method in ("rsnl", "snl"):
        text = base.replace("method: rsnl", f"method: {method}")
        with tempfile.NamedTemporaryFile("w", suffix=".yaml", delete=False) as fh:
            fh.write(text)
            cfg_path = fh.name
        out_dir = Path(args.out) / method
        code = cmd_coverage(cfg_path, n_replicates=args.c, workers=args.workers,
                            output_dir=out_dir)
        if code != 0:
            return code
        with open(out_dir / "coverage.csv") as fh:
            rows = list(csv.DictReader(fh))
        results[method] = {float(r["credibility"]): float(r["coverage"]) for r in rows}

    print(f"\n{'credibility':>12} {'rsnl':>8} {'snl':>8} {'gap':>8}")
    for cred in sorted(results["rsnl"]):
        a, b = results["rsnl"][cred], results["snl"][cred]
        print(f"{cred:>12.2f} {a:>8.3f} {b:>8.3f} {abs(a - b):>8.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
