#!/usr/bin/env python3
"""Run the synthetic end-to-end benchmark and print its summary as JSON.

Pretrains the full model on generated sinusoid data, probes the frozen
features against a randomly initialized control backbone, and writes
results.jsonl / curves_pretrain.csv / summary.json into --out. Defaults
reproduce the acceptance-scale run (8 subjects, 10 minutes each, 50 Hz);
the knobs below shrink it for quick trials.
"""

import argparse
import json
import sys

from cpc_har.benchmark import BenchmarkConfig, run_benchmark


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/benchmark", help="output directory")
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--subjects", type=int, default=8)
    ap.add_argument("--duration", type=float, default=600.0,
                    help="seconds of data per subject")
    ap.add_argument("--epochs", type=int, default=50,
                    help="pretraining epoch budget")
    ap.add_argument("--probe-seeds", type=int, default=3)
    args = ap.parse_args()

    config = BenchmarkConfig(seed=args.seed, subjects=args.subjects,
                             duration_s=args.duration,
                             pretrain_epochs=args.epochs,
                             probe_seeds=args.probe_seeds)
    summary = run_benchmark(config, out_dir=args.out,
                            log=lambda m: print(m, file=sys.stderr, flush=True))
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
