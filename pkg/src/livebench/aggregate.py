"""Missingness handling, ranking and leaderboards."""

from __future__ import annotations

import logging
import math
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from . import store
from .errors import AggregationError, NotFound
from .measures import MEASURE_HEADER, MEASURE_SPECS, compute_measures, measure_path, read_measure_csv

log = logging.getLogger(__name__)

STRATEGY_KINDS = ("repetition_wise", "method_wise", "replacement")
MODES = ("by_condition", "by_set")
LEADERBOARD_HEADER = ["method_id", "mean_rank", "min", "max", "mean", "median", "n_cells"]


@dataclass(frozen=True)
class MissingnessStrategy:
    kind: str = "method_wise"
    replacement_method_id: Optional[str] = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"strategy must be one of {STRATEGY_KINDS}, got {self.kind!r}")
        if (self.kind == "replacement") != (self.replacement_method_id is not None):
            raise ValueError("replacement_method_id is required iff kind == 'replacement'")

    @property
    def label(self) -> str:
        if self.kind == "replacement":
            return f"replacement:{self.replacement_method_id}"
        return self.kind

    @property
    def slug(self) -> str:
        return self.label.replace(":", "_")

    @classmethod
    def parse(cls, text: str) -> "MissingnessStrategy":
        kind, _, rep = text.partition(":")
        return cls(kind, rep or None)


@dataclass(frozen=True)
class DgmSet:
    set_id: str
    condition_ids: tuple[str, ...]

    def __post_init__(self):
        if not self.condition_ids:
            raise AggregationError(f"DGM set {self.set_id!r} is empty")


@dataclass
class LeaderboardRow:
    method_id: str
    mean_rank: float
    min: Optional[float]
    max: Optional[float]
    mean: Optional[float]
    median: Optional[float]
    n_cells: int
    set_ranks: dict = field(default_factory=dict)
    by_condition: float = math.nan
    by_set: float = math.nan
    n_missing: int = 0
    strategy: str = ""
    mode: str = ""

    def row(self) -> list[str]:
        def f(x):
            return "" if x is None else store.format_float(x)

        return [self.method_id, f(self.mean_rank), f(self.min), f(self.max), f(self.mean),
                f(self.median), str(self.n_cells)]


# ---------------------------------------------------------------------------
# Missingness
# ---------------------------------------------------------------------------


def apply_missingness(results_by_method: dict, strategy: MissingnessStrategy) -> dict:
    """Filter per-method result lists according to a missingness strategy.

    ``results_by_method`` maps method id to a list of ``ResultRecord``
    sharing the repetition index space.
    """
    if strategy.kind == "method_wise":
        return {m: [r for r in rs if r.converged] for m, rs in results_by_method.items()}
    if strategy.kind == "repetition_wise":
        bad = {r.repetition for rs in results_by_method.values() for r in rs if not r.converged}
        reps = [{r.repetition for r in rs} for rs in results_by_method.values()]
        common = set.intersection(*reps) if reps else set()
        return {
            m: [r for r in rs if r.repetition in common and r.repetition not in bad]
            for m, rs in results_by_method.items()
        }
    rep_id = strategy.replacement_method_id
    if rep_id not in results_by_method:
        raise AggregationError(f"replacement method {rep_id!r} has no results here")
    fallback = {r.repetition: r for r in results_by_method[rep_id]}
    out = {}
    for m, rs in results_by_method.items():
        kept = []
        for r in rs:
            if r.converged or m == rep_id:
                kept.append(r)
                continue
            sub = fallback.get(r.repetition)
            if sub is None or not sub.converged:
                raise AggregationError(
                    f"replacement method {rep_id!r} did not converge on repetition {r.repetition}"
                )
            kept.append(replace(sub, note=f"replaced by {rep_id}"))
        out[m] = kept
    return out


# ---------------------------------------------------------------------------
# Ranking
# ---------------------------------------------------------------------------


def rank_methods(values: dict, direction: str, target: Optional[float] = None) -> dict:
    """Rank methods within one cell; 1 is best, ties get the average rank.

    Missing (``None`` or NaN) values share the worst ranks.  For ``target``
    measures the absolute deviation is rounded to 12 decimals so that
    deviations equal up to float noise (|0.90-0.95| vs |1.00-0.95|) tie.
    """
    methods = list(values)
    present = [m for m in methods if values[m] is not None and not math.isnan(values[m])]
    missing = [m for m in methods if m not in present]
    if direction == "lower_better":
        keys = [values[m] for m in present]
    elif direction == "higher_better":
        keys = [-values[m] for m in present]
    elif direction == "target":
        if target is None:
            raise ValueError("target direction needs a target value")
        keys = [round(abs(values[m] - target), 12) for m in present]
    else:
        raise ValueError(f"unknown direction {direction!r}")
    ranks = dict(zip(present, rankdata(keys, method="average").tolist())) if present else {}
    bottom = len(present) + (len(missing) + 1) / 2
    for m in missing:
        ranks[m] = bottom
    return ranks


def _check_sets(sets: Sequence[DgmSet]) -> list[tuple[str, list[str]]]:
    seen = {}
    out = []
    for s in sets:
        ids = list(dict.fromkeys(s.condition_ids))
        assert len(set(ids)) == len(ids)
        for cid in ids:
            if cid in seen:
                raise AggregationError(
                    f"condition {cid!r} appears in sets {seen[cid]!r} and {s.set_id!r}"
                )
            seen[cid] = s.set_id
        out.append((s.set_id, ids))
    return out


def set_mean_ranks(rank_tables: dict, sets: Sequence[DgmSet]) -> dict:
    """``{set_id: {method: mean rank within the set}}`` (condition ids de-duplicated)."""
    out = {}
    for set_id, ids in _check_sets(sets):
        missing = [c for c in ids if c not in rank_tables]
        if missing:
            raise AggregationError(f"set {set_id!r} names unknown conditions {missing[:3]}")
        methods = rank_tables[ids[0]].keys()
        out[set_id] = {m: float(np.mean([rank_tables[c][m] for c in ids])) for m in methods}
    return out


def aggregate_ranks(rank_tables: dict, mode: str, sets: Sequence[DgmSet] | None = None) -> dict:
    """Average per-condition ranks.

    ``by_condition`` gives every condition one vote; ``by_set`` first
    averages within each DGM set and then gives every set one vote, so
    conditions repeated across a redundant set cannot outvote other sets.
    """
    if sets is None:
        sets = [DgmSet("all", tuple(rank_tables))]
    if mode == "by_set":
        per_set = set_mean_ranks(rank_tables, sets)
        methods = next(iter(per_set.values())).keys()
        return {m: float(np.mean([per_set[s][m] for s in per_set])) for m in methods}
    if mode == "by_condition":
        ids = [c for _, cs in _check_sets(sets) for c in cs]
        methods = rank_tables[ids[0]].keys()
        return {m: float(np.mean([rank_tables[c][m] for c in ids])) for m in methods}
    raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def summarize(values: Sequence[float]) -> tuple[float, float, float, float]:
    """(min, max, mean, median) of the given values."""
    vals = [float(v) for v in values]
    if not vals:
        raise ValueError("summarize needs at least one value")
    return min(vals), max(vals), float(np.mean(vals)), float(statistics.median(vals))


# ---------------------------------------------------------------------------
# Leaderboards
# ---------------------------------------------------------------------------


def leaderboard_path(root, measure_id: str, strategy: MissingnessStrategy, mode: str,
                     dgm_ids: Sequence[str]):
    name = f"leaderboard-{measure_id}-{strategy.slug}-{mode}.csv"
    if len(dgm_ids) == 1:
        return store.measures_dir(root, dgm_ids[0]) / name
    return Path(root) / "measures" / name


def _needs_compute(root, dgm_id, measure_id, strategy, methods, condition_ids) -> bool:
    path = measure_path(root, dgm_id, measure_id)
    if not path.exists():
        return True
    have = {(r[0], r[1]) for r in store.read_csv_rows(path, MEASURE_HEADER) if r[5] == strategy.label}
    return any((m, c) not in have for m in methods for c in condition_ids)


def load_cell_values(root, measure_id, strategy, methods, dgm_ids, auto_compute=True,
                     jobs=1, frozen_time=None, notices=None):
    """``{cell: {method: value}}`` with cells named ``<dgm_id>/<condition_id>``."""
    from .dgm import load_conditions

    cells = {}
    for dgm_id in dgm_ids:
        cids = [c.condition_id for c in load_conditions(root, dgm_id)]
        if _needs_compute(root, dgm_id, measure_id, strategy, methods, cids):
            if not auto_compute:
                raise NotFound(f"measure {measure_id!r} not computed for {dgm_id!r}")
            if notices is not None:
                notices.append(f"computing {measure_id} for {dgm_id} ({strategy.label})")
            compute_measures(root, dgm_id, [measure_id], strategy, jobs=jobs,
                             method_ids=methods, frozen_time=frozen_time)
        values = read_measure_csv(measure_path(root, dgm_id, measure_id), measure_id)
        lookup = {(v.method_id, v.condition_id): v.value for v in values
                  if v.missingness_strategy == strategy.label}
        for cid in cids:
            cells[f"{dgm_id}/{cid}"] = {m: lookup.get((m, cid)) for m in methods}
    return cells


def build_leaderboard(root, measure_id: str, strategy: MissingnessStrategy | None = None,
                      mode: str = "by_condition", include_deprecated: bool = False,
                      dgm_ids: Sequence[str] | None = None, sets: Sequence[DgmSet] | None = None,
                      auto_compute: bool = True, jobs: int = 1, frozen_time=None,
                      notices: list | None = None, write: bool = True) -> list[LeaderboardRow]:
    """Rank methods on one measure across the conditions of one or more DGMs.

    By default every active DGM forms one set.  Cells where every method's
    value is missing (e.g. power on null conditions) are skipped.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    spec = MEASURE_SPECS.get(measure_id)
    if spec is None:
        raise KeyError(f"unknown measure {measure_id!r}")
    strategy = strategy or MissingnessStrategy()
    notices = notices if notices is not None else []
    manifest = store.load_manifest(root)
    methods = sorted(manifest.active_ids("method", include_deprecated))
    if not methods:
        raise AggregationError("no methods to rank")
    if dgm_ids is None:
        dgm_ids = manifest.active_ids("dgm", include_deprecated)
    dgm_ids = list(dgm_ids)
    cells = load_cell_values(root, measure_id, strategy, methods, dgm_ids, auto_compute,
                             jobs, frozen_time, notices)
    cells = {c: v for c, v in cells.items() if any(x is not None for x in v.values())}
    if not cells:
        raise AggregationError(f"measure {measure_id!r} has no values to rank")
    rank_tables = {c: rank_methods(v, spec.direction, spec.target_value) for c, v in cells.items()}
    if sets is None:
        grouped = {d: tuple(c for c in cells if c.split("/", 1)[0] == d) for d in dgm_ids}
        sets = [DgmSet(d, cs) for d, cs in grouped.items() if cs]
    else:
        sets = [DgmSet(s.set_id, tuple(c for c in s.condition_ids if c in cells))
                for s in sets if any(c in cells for c in s.condition_ids)]
    by_condition = aggregate_ranks(rank_tables, "by_condition", sets)
    by_set = aggregate_ranks(rank_tables, "by_set", sets)
    per_set = set_mean_ranks(rank_tables, sets)
    used_cells = [c for s in sets for c in dict.fromkeys(s.condition_ids)]
    rank_only = spec.scale_dependent and len({c.split("/", 1)[0] for c in used_cells}) > 1
    if rank_only:
        msg = (f"{measure_id} is scale dependent and spans several DGMs; "
               "reporting ranks only")
        log.warning(msg)
        notices.append(msg)
    rows = []
    for m in methods:
        vals = [cells[c][m] for c in used_cells]
        finite = [v for v in vals if v is not None and math.isfinite(v)]
        stats = (None,) * 4 if rank_only or not finite else summarize(finite)
        rows.append(LeaderboardRow(
            method_id=m,
            mean_rank=by_condition[m] if mode == "by_condition" else by_set[m],
            min=stats[0], max=stats[1], mean=stats[2], median=stats[3],
            n_cells=len(used_cells),
            set_ranks={s: per_set[s][m] for s in per_set},
            by_condition=by_condition[m],
            by_set=by_set[m],
            n_missing=sum(v is None for v in vals),
            strategy=strategy.label,
            mode=mode,
        ))
    rows.sort(key=lambda r: (r.mean_rank, r.method_id))
    if write:
        write_leaderboard(leaderboard_path(root, measure_id, strategy, mode, dgm_ids), rows)
    return rows


def write_leaderboard(path, rows: Sequence[LeaderboardRow]) -> None:
    store.write_csv_file(path, LEADERBOARD_HEADER, (r.row() for r in rows), atomic=True)


def read_leaderboard(path) -> list[list[str]]:
    return store.read_csv_rows(path, LEADERBOARD_HEADER)
