#!/usr/bin/env python3
"""Run the full toy pipeline end to end via the CLI and time each stage.

    python scripts/run_toy_pipeline.py --out runs/toy [--config cfg.json] [--seed 7]

Stages: dataset-gen -> pretrain-inversion -> train-estimators -> train ->
eval (synthetic + real anchors) -> export-grid. Prints a timing table and
exits nonzero if any stage fails.
"""

import argparse
import sys
import time

from aulatent.cli import main as cli_main


def run(argv: list[str]) -> float:
    t0 = time.monotonic()
    rc = cli_main(argv)
    if rc != 0:
        print(f"stage failed: {' '.join(argv)}", file=sys.stderr)
        sys.exit(rc)
    return time.monotonic() - t0


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="runs/toy")
    parser.add_argument("--config", default=None)
    parser.add_argument("--seed", default=None)
    args = parser.parse_args()

    common = ["--out", args.out]
    if args.config:
        common += ["--config", args.config]
    if args.seed is not None:
        common += ["--seed", str(args.seed)]

    stages = [
        ["dataset-gen"],
        ["pretrain-inversion"],
        ["train-estimators"],
        ["train"],
        ["eval", "--anchor", "synthetic"],
        ["eval", "--anchor", "real"],
        ["export-grid", "--rows", "6"],
    ]
    times = {}
    total0 = time.monotonic()
    for stage in stages:
        name = " ".join(stage)
        print(f"== {name}")
        times[name] = run(stage + common)
    total = time.monotonic() - total0

    print("\nstage timings:")
    for name, dt in times.items():
        print(f"  {name:28s} {dt:8.1f}s")
    print(f"  {'total':28s} {total:8.1f}s")


if __name__ == "__main__":
    main()
