#!/usr/bin/env python3
"""Run the shipped benchmark configs end to end and diagnose each run.

Usage: python scripts/run_benchmarks.py [--configs a.yaml b.yaml ...] [--out DIR]

By default every YAML in configs/ is executed with `rsnl run` followed by
`rsnl diagnose`. Full-budget runs take tens of minutes each; pass specific
configs for a quicker look.
"""

import argparse
import sys
from pathlib import Path

from rsnl.cli import cmd_diagnose, cmd_run


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--configs", nargs="*", default=None)
    parser.add_argument("--out", default="runs")
    args = parser.parse_args()

    repo = Path(__file__).resolve().parent.parent
    configs = (
        [Path(c) for c in args.configs]
        if args.configs
        else sorted((repo / "configs").glob("*.yaml"))
    )
    failures = 0
    for cfg in configs:
        if cfg.stem == "well_specified_coverage":
            continue  # coverage study has its own driver
        out_dir = Path(args.out) / cfg.stem
        print(f"=== {cfg.stem} -> {out_dir}")
        code = cmd_run(cfg, output_dir=out_dir)
        if code == 0:
            code = cmd_diagnose(out_dir)
        failures += code != 0
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
