"""``bench`` command line: init, simulate, run, measure, leaderboard, report,
validate, retire, register.

Exit codes: 0 success, 1 validation or data failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import store
from .aggregate import MODES, DgmSet, MissingnessStrategy, build_leaderboard
from .dgm import (
    GENERATOR_NAME, default_grid, dgm_meta, generate_dgm, read_conditions_csv,
    write_conditions_csv,
)
from .errors import AggregationError, BenchError, NotFound
from .estimators import (
    METHOD_IDS, METHOD_VERSION, MethodSpec, environment_string, parse_options, run_method,
)
from .measures import MEASURE_IDS, compute_measures
from .report import fmt3, write_report

FROZEN_DEFAULT = "2000-01-01"


class UsageError(Exception):
    pass


def _strategy(text: str) -> MissingnessStrategy:
    try:
        return MissingnessStrategy.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(
            f"{exc}; use method_wise, repetition_wise or replacement:<method_id>"
        ) from None


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--root", default=os.environ.get("BENCH_ROOT", "."),
                        help="benchmark root directory (default: $BENCH_ROOT or .)")
    common.add_argument("--frozen-time", nargs="?", const=FROZEN_DEFAULT, default=None,
                        metavar="DATE", help="pin added_at dates (for reproducible trees)")

    parser = argparse.ArgumentParser(prog="bench", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", parents=[common], help="create a new benchmark")
    p.add_argument("--name", help="benchmark name (default: directory name)")

    p = sub.add_parser("simulate", parents=[common], help="generate pre-simulated data")
    p.add_argument("--dgm", required=True)
    p.add_argument("--reps", required=True, type=_positive)
    p.add_argument("--seed", type=_seed, default=1)
    p.add_argument("--grid", default="default", help="'default' or a conditions.csv file")
    p.add_argument("--version", default="1.0.0", help="DGM version to register")
    p.add_argument("--jobs", type=_positive, default=1)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("run", parents=[common], help="apply a built-in method")
    p.add_argument("--method", required=True)
    p.add_argument("--dgm", action="append", help="DGM id (repeatable; default: all active)")
    p.add_argument("--jobs", type=_positive, default=1)
    p.add_argument("--opt", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("measure", parents=[common], help="compute performance measures")
    p.add_argument("--dgm", action="append")
    p.add_argument("--measure", action="append", choices=MEASURE_IDS)
    p.add_argument("--strategy", type=_strategy, default=MissingnessStrategy())
    p.add_argument("--include-deprecated", action="store_true")
    p.add_argument("--jobs", type=_positive, default=1)

    p = sub.add_parser("leaderboard", parents=[common], help="rank methods on a measure")
    p.add_argument("--measure", required=True, choices=MEASURE_IDS)
    p.add_argument("--strategy", type=_strategy, default=MissingnessStrategy())
    p.add_argument("--mode", choices=MODES, default="by_condition")
    p.add_argument("--include-deprecated", action="store_true")
    p.add_argument("--dgm", action="append")
    p.add_argument("--sets", help="JSON file mapping set id to a list of <dgm>/<condition> cells")
    p.add_argument("--jobs", type=_positive, default=1)

    p = sub.add_parser("report", parents=[common], help="write the static HTML report")
    p.add_argument("--out", help="output directory (default: <root>/report)")
    p.add_argument("--strategy", type=_strategy, default=MissingnessStrategy())
    p.add_argument("--include-deprecated", action="store_true")
    p.add_argument("--plots", action="store_true", help="reserved; v1 emits tables only")
    p.add_argument("--jobs", type=_positive, default=1)

    p = sub.add_parser("validate", parents=[common], help="check a method's result files")
    p.add_argument("--dgm", required=True)
    p.add_argument("--method", required=True)

    p = sub.add_parser("retire", parents=[common], help="deprecate a component")
    p.add_argument("--kind", required=True, choices=store.KINDS)
    p.add_argument("--id", required=True)

    p = sub.add_parser("register", parents=[common],
                       help="register an externally computed method or other component")
    p.add_argument("--kind", required=True, choices=store.KINDS)
    p.add_argument("--id", required=True)
    p.add_argument("--version", required=True)
    p.add_argument("--provenance", default="")
    p.add_argument("--environment", default="")
    return parser


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_init(args) -> int:
    root = Path(args.root)
    name = args.name or root.resolve().name
    store.init_benchmark(root, name)
    print(f"initialized benchmark {name!r} at {root}")
    return 0


def _load_grid(spec: str):
    if spec == "default":
        return default_grid()
    path = Path(spec)
    if not path.exists():
        raise UsageError(f"grid file {spec} not found")
    return read_conditions_csv(path)


def cmd_simulate(args) -> int:
    root = Path(args.root)
    manifest = store.load_manifest(root)
    conditions = _load_grid(args.grid)
    if not manifest.has("dgm", args.dgm):
        store.register_component(root, "dgm", store.ComponentEntry(
            args.dgm, args.version, "active",
            f"livebench step-selection SMD DGM; generator {GENERATOR_NAME}",
            store.today(args.frozen_time),
        ))
        manifest = store.load_manifest(root)
    version = manifest.get("dgm", args.dgm).version
    ddir = store.dgm_dir(root, args.dgm)
    meta_file = ddir / "meta.json"
    new_meta = dgm_meta(args.dgm, version, args.seed, args.reps)
    data_files = [store.data_path(root, args.dgm, c.condition_id) for c in conditions]
    if not args.force and meta_file.exists():
        same_meta = json.loads(meta_file.read_text("utf-8")) == new_meta
        tmp = ddir / ".conditions.check"
        write_conditions_csv(tmp, conditions)
        same_grid = (ddir / "conditions.csv").read_bytes() == tmp.read_bytes()
        tmp.unlink()
        if same_meta and same_grid and all(p.exists() for p in data_files):
            print(f"{args.dgm}: up-to-date, no files written ({len(conditions)} conditions)")
            return 0
        if any(p.exists() for p in data_files):
            print(f"error: {args.dgm} already has data generated with different settings; "
                  "use --force to overwrite", file=sys.stderr)
            return 1
    sizes = generate_dgm(root, args.dgm, conditions, args.reps, args.seed,
                         force=args.force, jobs=args.jobs)
    print(f"{args.dgm}: {len(sizes)} conditions x {args.reps} repetitions, "
          f"{sum(sizes.values())} bytes written")
    return 0


def _dgms(manifest, requested):
    if requested:
        for d in requested:
            manifest.get("dgm", d)
        return list(requested)
    return manifest.active_ids("dgm")


def cmd_run(args) -> int:
    if args.method not in METHOD_IDS:
        raise UsageError(
            f"unknown method {args.method!r}; registered methods: {', '.join(METHOD_IDS)}"
        )
    try:
        options = parse_options(args.method, args.opt)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    alpha = options.pop("alpha", 0.05)
    root = Path(args.root)
    manifest = store.load_manifest(root)
    spec = MethodSpec(args.method, METHOD_VERSION, alpha, options)
    opts = ", ".join(f"{k}={v}" for k, v in sorted({"alpha": alpha, **options}.items()))
    if not manifest.has("method", args.method):
        entry = store.ComponentEntry(
            args.method, METHOD_VERSION, "active",
            f"livebench built-in estimator {args.method}; options: {opts}",
            store.today(args.frozen_time),
        )
        manifest = store.register_component(root, "method", entry)
        store.write_method_meta(root, entry, environment_string())
    from .dgm import load_conditions

    for dgm_id in _dgms(manifest, args.dgm):
        cids = [c.condition_id for c in load_conditions(root, dgm_id)]
        paths = [store.results_path(root, dgm_id, args.method, c) for c in cids]
        if not args.force and all(p.exists() for p in paths):
            print(f"{args.method} on {dgm_id}: up-to-date, no files written")
            continue
        if not args.force and any(p.exists() for p in paths):
            print(f"error: some result files for {args.method} on {dgm_id} exist; "
                  "use --force to overwrite", file=sys.stderr)
            return 1
        summary = run_method(root, dgm_id, spec, jobs=args.jobs, force=args.force)
        print(f"{args.method} on {dgm_id} ({opts}):")
        print(f"  {'condition':<32} converged")
        for cid, n_conv, n in summary:
            print(f"  {cid:<32} {n_conv}/{n} ({n_conv / n:.3f})")
    return 0


def cmd_measure(args) -> int:
    root = Path(args.root)
    manifest = store.load_manifest(root)
    measures = args.measure or list(MEASURE_IDS)
    methods = manifest.active_ids("method", args.include_deprecated)
    for dgm_id in _dgms(manifest, args.dgm):
        out = compute_measures(root, dgm_id, measures, args.strategy, jobs=args.jobs,
                               method_ids=methods, frozen_time=args.frozen_time)
        for mid, values in out.items():
            print(f"{dgm_id}/{mid}: {len(values)} rows ({args.strategy.label})")
    return 0


def _load_sets(path):
    if path is None:
        return None
    try:
        obj = json.loads(Path(path).read_text("utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read sets file: {exc}") from None
    return [DgmSet(k, tuple(v)) for k, v in obj.items()]


def cmd_leaderboard(args) -> int:
    root = Path(args.root)
    manifest = store.load_manifest(root)
    notices = []
    rows = build_leaderboard(
        root, args.measure, args.strategy, args.mode, args.include_deprecated,
        dgm_ids=_dgms(manifest, args.dgm), sets=_load_sets(args.sets), jobs=args.jobs,
        frozen_time=args.frozen_time, notices=notices,
    )
    for n in notices:
        print(f"notice: {n}")
    print(f"leaderboard: {args.measure}, {args.strategy.label}, {args.mode}")
    print(f"{'rank':>5} {'method':<12} {'mean rank':>9} {'min':>9} {'max':>9} "
          f"{'mean':>9} {'median':>9} {'cells':>6}")
    for i, r in enumerate(rows[:10], start=1):
        print(f"{i:>5} {r.method_id:<12} {fmt3(r.mean_rank):>9} {fmt3(r.min):>9} "
              f"{fmt3(r.max):>9} {fmt3(r.mean):>9} {fmt3(r.median):>9} {r.n_cells:>6}")
    return 0


def cmd_report(args) -> int:
    root = Path(args.root)
    manifest = store.load_manifest(root)
    if args.plots:
        print("notice: --plots is reserved; this version emits tables only")
    dgm_ids = manifest.active_ids("dgm", args.include_deprecated)
    notices = []
    for mid in MEASURE_IDS:
        for mode in MODES:
            try:
                build_leaderboard(root, mid, args.strategy, mode, args.include_deprecated,
                                  dgm_ids=dgm_ids, jobs=args.jobs,
                                  frozen_time=args.frozen_time, notices=notices)
            except AggregationError as exc:
                notices.append(f"{mid} ({mode}): {exc}")
    for n in dict.fromkeys(notices):
        print(f"notice: {n}")
    out = Path(args.out) if args.out else root / "report"
    files = write_report(root, out, args.strategy, args.include_deprecated)
    print(f"report: {len(files)} files written to {out}")
    return 0


def cmd_validate(args) -> int:
    report = store.validate_submission(Path(args.root), args.dgm, args.method)
    print(report.format())
    return 0 if report.passed else 1


def cmd_retire(args) -> int:
    store.retire_component(Path(args.root), args.kind, args.id)
    print(f"{args.kind} {args.id!r} retired (status deprecated, files kept)")
    return 0


def cmd_register(args) -> int:
    root = Path(args.root)
    try:
        entry = store.ComponentEntry(args.id, args.version, "active", args.provenance,
                                     store.today(args.frozen_time))
    except store.SchemaViolation as exc:
        raise UsageError(str(exc)) from None
    store.register_component(root, args.kind, entry)
    if args.kind == "method":
        store.write_method_meta(root, entry, args.environment)
    print(f"registered {args.kind} {args.id!r} version {args.version}")
    return 0


COMMANDS = {
    "init": cmd_init, "simulate": cmd_simulate, "run": cmd_run, "measure": cmd_measure,
    "leaderboard": cmd_leaderboard, "report": cmd_report, "validate": cmd_validate,
    "retire": cmd_retire, "register": cmd_register,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"bench {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (BenchError, FileExistsError, KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
