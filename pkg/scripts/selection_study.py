"""Bias and coverage of each method as publication selection strengthens.

Usage::

    python3 scripts/selection_study.py [--reps N] [--k K] [--mu MU] [--tau TAU]

Simulates one condition per selection probability (1, 0.3, 0.1, 0.05) with
one-sided step selection, applies the chosen methods and prints bias (with
MCSE) and CI coverage per method.
"""

import argparse
import tempfile
from pathlib import Path

from livebench import store
from livebench.dgm import Condition, generate_dgm
from livebench.estimators import METHOD_IDS, MethodSpec, run_method
from livebench.measures import compute_measures, measure_path, read_measure_csv

SELECTION_PROBS = (1.0, 0.3, 0.1, 0.05)
N_PROFILE = (15, 25, 50, 100, 250)


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--reps", type=int, default=500)
    p.add_argument("--k", type=int, default=30)
    p.add_argument("--mu", type=float, default=0.0)
    p.add_argument("--tau", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--methods", nargs="+", default=["fe", "re_kh", "wls", "pet", "pet_peese",
                                                    "trim_fill", "sm_3p"],
                   choices=METHOD_IDS)
    return p.parse_args()


def study(root: Path, args) -> None:
    store.init_benchmark(root, "selection-study")
    store.register_component(root, "dgm", store.ComponentEntry("sel", "1.0.0"))
    conds = [Condition(f"sp{sp:g}", args.k, args.mu, args.tau, sp, True, N_PROFILE)
             for sp in SELECTION_PROBS]
    generate_dgm(root, "sel", conds, args.reps, args.seed)
    for m in args.methods:
        store.register_component(root, "method", store.ComponentEntry(m, "1.0.0"))
        run_method(root, "sel", MethodSpec(m))
    compute_measures(root, "sel", ["bias", "coverage"])
    table = {}
    for mid in ("bias", "coverage"):
        for v in read_measure_csv(measure_path(root, "sel", mid), mid):
            table[(mid, v.method_id, v.condition_id)] = v
    print(f"k={args.k} mu={args.mu} tau={args.tau} reps={args.reps}")
    print(f"{'method':<10}" + "".join(f"{c.condition_id:>26}" for c in conds))
    for m in args.methods:
        cells = []
        for c in conds:
            b, cov = table[("bias", m, c.condition_id)], table[("coverage", m, c.condition_id)]
            bias = "n/a" if b.value is None else f"{b.value:+.3f}({b.mcse:.3f})"
            cv = "n/a" if cov.value is None else f"{cov.value:.3f}"
            cells.append(f"{bias} cov {cv}")
        print(f"{m:<10}" + "".join(f"{x:>26}" for x in cells))


if __name__ == "__main__":
    args = parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        study(Path(tmp) / "bench", args)
