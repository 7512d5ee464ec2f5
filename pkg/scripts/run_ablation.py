#!/usr/bin/env python3
"""Run the five component-swap configurations on synthetic data.

Thin wrapper over `cpc-har ablate` that exposes the scale knobs as plain
flags. With --plan-only it just emits the row configs and hashes; otherwise
each row pretrains and is probed under user-disjoint cross-validation
(several minutes per row at full scale).
"""

import argparse
import sys

from cpc_har.cli import main as cli_main


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablation", help="output directory")
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--subjects", type=int, default=8)
    ap.add_argument("--duration", type=float, default=600.0,
                    help="seconds of data per subject")
    ap.add_argument("--epochs", type=int, default=50,
                    help="pretraining epoch budget per row")
    ap.add_argument("--workers", type=int, default=1,
                    help="rows to run in parallel")
    ap.add_argument("--plan-only", action="store_true",
                    help="emit configs and hashes without training")
    ap.add_argument("--force", action="store_true")
    args = ap.parse_args()

    argv = [
        "ablate",
        "--set", f"data.subjects={args.subjects}",
        "--set", f"data.duration_s={args.duration}",
        "--set", f"train.epochs={args.epochs}",
        "--out", args.out,
        "--seed", str(args.seed),
        "--workers", str(args.workers),
    ]
    if args.plan_only:
        argv.append("--plan-only")
    if args.force:
        argv.append("--force")
    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())
