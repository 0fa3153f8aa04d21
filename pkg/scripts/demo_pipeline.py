"""Run the full command-line pipeline on a small default-grid benchmark.

Usage::

    python3 scripts/demo_pipeline.py [--root DIR] [--reps N] [--jobs J]

Creates the benchmark, simulates the default step-selection grid, applies all
built-in methods, computes measures, builds both leaderboards for every
measure and writes the HTML report under ``<root>/report``.
"""

import argparse
import sys
import tempfile
from pathlib import Path

from livebench.cli import main
from livebench.estimators import METHOD_IDS
from livebench.measures import MEASURE_IDS


def run(argv):
    print("$ bench", " ".join(argv), flush=True)
    code = main(argv)
    if code != 0:
        sys.exit(code)


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--root", type=Path, help="benchmark directory (default: a temp dir)")
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--jobs", type=int, default=1)
    return p.parse_args()


def pipeline(root: Path, reps: int, seed: int, jobs: int) -> None:
    common = ["--root", str(root), "--frozen-time"]
    j = ["--jobs", str(jobs)]
    run(["init", *common])
    run(["simulate", *common, "--dgm", "step_smd", "--reps", str(reps), "--seed", str(seed), *j])
    for method in METHOD_IDS:
        run(["run", *common, "--method", method, *j])
    run(["measure", *common, *j])
    for measure in MEASURE_IDS:
        for mode in ("by_condition", "by_set"):
            run(["leaderboard", *common, "--measure", measure, "--mode", mode, *j])
    run(["report", *common, *j])
    print(f"report: {root / 'report' / 'index.html'}")


if __name__ == "__main__":
    args = parse_args()
    if args.root is None:
        with tempfile.TemporaryDirectory() as tmp:
            pipeline(Path(tmp) / "bench", args.reps, args.seed, args.jobs)
    else:
        pipeline(args.root, args.reps, args.seed, args.jobs)
