"""Performance measures with Monte Carlo standard errors."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import store
from .dgm import Condition, load_conditions
from .errors import NotFound
from .parallel import pmap

MEASURE_HEADER = ["method_id", "condition_id", "value", "mcse", "n_used", "missingness_strategy"]
MEASURE_VERSION = "1.0.0"


@dataclass(frozen=True)
class MeasureSpec:
    id: str
    direction: str  # lower_better | higher_better | target
    target_value: Optional[float] = None
    scale_dependent: bool = False
    description: str = ""


MEASURE_SPECS: dict[str, MeasureSpec] = {
    s.id: s
    for s in [
        MeasureSpec("bias", "target", 0.0, True, "mean estimate minus true effect"),
        MeasureSpec("relative_bias", "target", 0.0, False, "bias divided by the true effect"),
        MeasureSpec("rmse", "lower_better", None, True, "root mean squared error"),
        MeasureSpec("log_se_sd", "target", 0.0, False,
                    "log of mean estimated SE over empirical SD of estimates"),
        MeasureSpec("coverage", "target", 0.95, False, "95% CI coverage of the true effect"),
        MeasureSpec("ci_width", "lower_better", None, True, "mean 95% CI width"),
        MeasureSpec("interval_score", "lower_better", None, True,
                    "interval score (width plus miss penalties)"),
        MeasureSpec("type1_error", "target", 0.05, False, "rejection rate under mu = 0"),
        MeasureSpec("power", "higher_better", None, False, "rejection rate under mu != 0"),
        MeasureSpec("lr_plus", "higher_better", None, False, "positive likelihood ratio"),
        MeasureSpec("lr_minus", "lower_better", None, False, "negative likelihood ratio"),
        MeasureSpec("convergence", "higher_better", None, False, "share of converged repetitions"),
    ]
}
MEASURE_IDS = tuple(MEASURE_SPECS)


@dataclass
class MeasureValue:
    measure_id: str
    method_id: str
    condition_id: str
    value: Optional[float]
    mcse: Optional[float]
    n_used: int
    missingness_strategy: str = ""
    note: str = ""

    def row(self) -> list[str]:
        return [
            self.method_id,
            self.condition_id,
            _fmt(self.value),
            _fmt(self.mcse),
            str(self.n_used),
            self.missingness_strategy,
        ]


def _fmt(x):
    return "" if x is None else store.format_float(x)


def _missing(measure_id, n_used, note):
    return MeasureValue(measure_id, "", "", None, None, n_used, note=note)


def _converged(results):
    return [r for r in results if r.converged]


def _mean_mcse(x: np.ndarray):
    """Mean and its Monte Carlo SE (sd / sqrt(n)); SE is None for n < 2."""
    n = len(x)
    value = float(np.mean(x))
    mcse = float(np.std(x, ddof=1) / math.sqrt(n)) if n > 1 else None
    return value, mcse


def _jackknife_se(x: np.ndarray, stat) -> Optional[float]:
    """Delete-one jackknife standard error of ``stat`` over the rows of ``x``."""
    n = len(x)
    if n < 2:
        return None
    reps = np.array([stat(np.delete(x, i, axis=0)) for i in range(n)])
    if not np.all(np.isfinite(reps)):
        return None
    return float(math.sqrt((n - 1) / n * np.sum((reps - reps.mean()) ** 2)))


def _proportion(hits: np.ndarray):
    n = len(hits)
    p = float(np.mean(hits))
    return p, float(math.sqrt(p * (1 - p) / n))


def bias(results, mu) -> MeasureValue:
    rs = _converged(results)
    if not rs:
        return _missing("bias", 0, "no converged repetitions")
    est = np.array([r.estimate for r in rs])
    value, mcse = _mean_mcse(est)
    return MeasureValue("bias", "", "", value - mu, mcse, len(rs))


def relative_bias(results, mu) -> MeasureValue:
    rs = _converged(results)
    if mu == 0:
        return _missing("relative_bias", len(rs), "undefined at null")
    b = bias(rs, mu)
    if b.value is None:
        return _missing("relative_bias", 0, b.note)
    mcse = None if b.mcse is None else b.mcse / abs(mu)
    return MeasureValue("relative_bias", "", "", b.value / mu, mcse, b.n_used)


def rmse(results, mu) -> MeasureValue:
    rs = _converged(results)
    if not rs:
        return _missing("rmse", 0, "no converged repetitions")
    err = np.array([r.estimate for r in rs]) - mu
    value = float(math.sqrt(np.mean(err**2)))
    mcse = _jackknife_se(err, lambda e: math.sqrt(np.mean(e**2)))
    return MeasureValue("rmse", "", "", value, mcse, len(rs))


def log_se_sd(results) -> MeasureValue:
    rs = [r for r in _converged(results) if r.se is not None]
    if len(rs) < 2:
        return _missing("log_se_sd", len(rs), "fewer than 2 repetitions")
    data = np.array([[r.estimate, r.se] for r in rs])

    def stat(d):
        if len(d) < 2:
            return math.nan
        sd = np.std(d[:, 0], ddof=1)
        return math.log(np.mean(d[:, 1]) / sd) if sd > 0 else math.nan

    value = stat(data)
    if not math.isfinite(value):
        return _missing("log_se_sd", len(rs), "zero empirical SD")
    return MeasureValue("log_se_sd", "", "", value, _jackknife_se(data, stat), len(rs))


def coverage(results, mu) -> MeasureValue:
    rs = _converged(results)
    if not rs:
        return _missing("coverage", 0, "no converged repetitions")
    hits = np.array([r.ci_lower <= mu <= r.ci_upper for r in rs], dtype=float)
    value, mcse = _proportion(hits)
    return MeasureValue("coverage", "", "", value, mcse, len(rs))


def ci_width(results) -> MeasureValue:
    rs = _converged(results)
    if not rs:
        return _missing("ci_width", 0, "no converged repetitions")
    widths = np.array([r.ci_upper - r.ci_lower for r in rs])
    value, mcse = _mean_mcse(widths)
    return MeasureValue("ci_width", "", "", value, mcse, len(rs))


def interval_scores(lower, upper, mu, alpha=0.05) -> np.ndarray:
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    below = np.where(mu < lower, (2 / alpha) * (lower - mu), 0.0)
    above = np.where(mu > upper, (2 / alpha) * (mu - upper), 0.0)
    return (upper - lower) + below + above


def interval_score(results, mu, alpha=0.05) -> MeasureValue:
    rs = _converged(results)
    if not rs:
        return _missing("interval_score", 0, "no converged repetitions")
    scores = interval_scores([r.ci_lower for r in rs], [r.ci_upper for r in rs], mu, alpha)
    value, mcse = _mean_mcse(scores)
    return MeasureValue("interval_score", "", "", value, mcse, len(rs))


def rejection_rate(results, alpha=0.05, measure_id="rejection_rate") -> MeasureValue:
    rs = [r for r in _converged(results) if r.p_value is not None]
    if not rs:
        return _missing(measure_id, 0, "no converged repetitions")
    value, mcse = _proportion(np.array([r.p_value <= alpha for r in rs], dtype=float))
    return MeasureValue(measure_id, "", "", value, mcse, len(rs))


def likelihood_ratios(power_results, null_results, alpha=0.05):
    """Positive and negative likelihood ratios of the significance test.

    Uses the rejection rate on the alternative condition (power) and on its
    null counterpart (Type I error).  Standard errors come from the delta
    method; a zero (or unit) Type I error rate yields an ``inf`` ratio with
    no standard error.  ``n_used`` is the smaller of the two repetition
    counts.
    """
    pw = rejection_rate(power_results, alpha)
    a = rejection_rate(null_results, alpha)
    if pw.value is None or a.value is None:
        return (_missing("lr_plus", 0, "no converged repetitions"),
                _missing("lr_minus", 0, "no converged repetitions"))
    p, al = pw.value, a.value
    var_p = p * (1 - p) / pw.n_used
    var_a = al * (1 - al) / a.n_used
    n = min(pw.n_used, a.n_used)
    if al == 0:
        plus = MeasureValue("lr_plus", "", "", math.inf, None, n, note="type I error rate is 0")
    else:
        se = math.sqrt(var_p / al**2 + var_a * p**2 / al**4)
        plus = MeasureValue("lr_plus", "", "", p / al, se, n)
    if al == 1:
        minus = MeasureValue("lr_minus", "", "", math.inf, None, n, note="type I error rate is 1")
    else:
        q = 1 - al
        se = math.sqrt(var_p / q**2 + var_a * (1 - p) ** 2 / q**4)
        minus = MeasureValue("lr_minus", "", "", (1 - p) / q, se, n)
    return plus, minus


def convergence_rate(all_results) -> MeasureValue:
    n = len(all_results)
    if n == 0:
        return _missing("convergence", 0, "no repetitions")
    value, mcse = _proportion(np.array([r.converged for r in all_results], dtype=float))
    return MeasureValue("convergence", "", "", value, mcse, n)


# ---------------------------------------------------------------------------
# Per-cell dispatch
# ---------------------------------------------------------------------------


def cell_measure(measure_id, filtered, raw, condition: Condition, null_filtered=None,
                 alpha=0.05) -> MeasureValue:
    """Compute one measure for one (method, condition) cell.

    ``filtered`` are the records surviving the missingness strategy, ``raw``
    the unfiltered records (used only by ``convergence``), ``null_filtered``
    the surviving records of the null counterpart condition.
    """
    mu = condition.mu
    if measure_id == "convergence":
        return convergence_rate(raw)
    if not _converged(filtered):
        return _missing(measure_id, 0, "no converged repetitions")
    if measure_id == "bias":
        return bias(filtered, mu)
    if measure_id == "relative_bias":
        return relative_bias(filtered, mu)
    if measure_id == "rmse":
        return rmse(filtered, mu)
    if measure_id == "log_se_sd":
        return log_se_sd(filtered)
    if measure_id == "coverage":
        return coverage(filtered, mu)
    if measure_id == "ci_width":
        return ci_width(filtered)
    if measure_id == "interval_score":
        return interval_score(filtered, mu, alpha)
    if measure_id == "type1_error":
        if mu != 0:
            return _missing(measure_id, 0, "defined for null conditions only")
        return rejection_rate(filtered, alpha, measure_id)
    if measure_id == "power":
        if mu == 0:
            return _missing(measure_id, 0, "defined for non-null conditions only")
        return rejection_rate(filtered, alpha, measure_id)
    if measure_id in ("lr_plus", "lr_minus"):
        if condition.null_counterpart_id is None or null_filtered is None:
            return _missing(measure_id, 0, "no null counterpart")
        plus, minus = likelihood_ratios(filtered, null_filtered, alpha)
        return plus if measure_id == "lr_plus" else minus
    raise KeyError(f"unknown measure {measure_id!r}")


# ---------------------------------------------------------------------------
# File-level computation
# ---------------------------------------------------------------------------


def measure_path(root, dgm_id: str, measure_id: str):
    return store.measures_dir(root, dgm_id) / f"{measure_id}.csv"


def _state_path(root, dgm_id):
    return store.measures_dir(root, dgm_id) / "inputs.json"


def _fingerprint(root, dgm_id, method_id, condition_ids) -> str:
    h = hashlib.sha256()
    for cid in condition_ids:
        path = store.results_path(root, dgm_id, method_id, cid)
        h.update(cid.encode())
        h.update(path.read_bytes() if path.exists() else b"<missing>")
    return h.hexdigest()


def load_results(root, dgm_id, method_ids, condition_ids):
    """``{condition_id: {method_id: [ResultRecord, ...]}}`` read from disk."""
    out = {}
    for cid in condition_ids:
        out[cid] = {}
        for mid in method_ids:
            path = store.results_path(root, dgm_id, mid, cid)
            if not path.exists():
                raise NotFound(f"no results for method {mid!r} on {dgm_id}/{cid}; run it first")
            out[cid][mid] = store.read_results_csv(path)
    return out


def _condition_cells(args):
    cond, null_cond, results, null_results, method_ids, measure_ids, strategy = args
    from .aggregate import apply_missingness

    filtered = apply_missingness(results, strategy)
    null_filtered = apply_missingness(null_results, strategy) if null_results else None
    out = []
    for mid in method_ids:
        for meas in measure_ids:
            mv = cell_measure(
                meas, filtered[mid], results[mid], cond,
                None if null_filtered is None else null_filtered[mid],
            )
            mv.measure_id, mv.method_id, mv.condition_id = meas, mid, cond.condition_id
            mv.missingness_strategy = strategy.label
            out.append(mv)
    return out


def compute_measures(root, dgm_id: str, measure_ids: Sequence[str] = MEASURE_IDS,
                     strategy=None, jobs: int = 1, method_ids: Sequence[str] | None = None,
                     frozen_time: Optional[str] = None) -> dict[str, list[MeasureValue]]:
    """Write ``measures/<dgm_id>/<measure_id>.csv`` for every active method.

    Rows of a method whose result files are unchanged since the last run are
    reused verbatim; only new or changed methods are recomputed.  Under
    repetition-wise deletion every method depends on every other, so any
    change recomputes all rows.
    """
    from .aggregate import MissingnessStrategy

    strategy = strategy or MissingnessStrategy("method_wise")
    manifest = store.load_manifest(root)
    if method_ids is None:
        method_ids = manifest.active_ids("method")
    method_ids = sorted(method_ids)
    for m in measure_ids:
        if m not in MEASURE_SPECS:
            raise KeyError(f"unknown measure {m!r}; known: {', '.join(MEASURE_IDS)}")
    conditions = load_conditions(root, dgm_id)
    by_id = {c.condition_id: c for c in conditions}
    cids = [c.condition_id for c in conditions]
    needed = set(method_ids)
    if strategy.kind == "replacement":
        needed.add(strategy.replacement_method_id)

    fingerprints = {m: _fingerprint(root, dgm_id, m, cids) for m in sorted(needed)}
    state_file = _state_path(root, dgm_id)
    state = json.loads(state_file.read_text("utf-8")) if state_file.exists() else {}
    prev = state.get(strategy.label, {})

    def stale(m):
        if prev.get(m) != fingerprints[m]:
            return True
        if strategy.kind == "replacement":
            return prev.get(strategy.replacement_method_id) != fingerprints[strategy.replacement_method_id]
        return False

    membership_changed = set(prev) != set(fingerprints)
    if strategy.kind == "repetition_wise" and (membership_changed or any(stale(m) for m in method_ids)):
        todo = list(method_ids)
    else:
        todo = [m for m in method_ids if stale(m)]

    existing = {}
    for meas in measure_ids:
        path = measure_path(root, dgm_id, meas)
        rows = {}
        if path.exists():
            for row in store.read_csv_rows(path, MEASURE_HEADER):
                if row[5] == strategy.label:
                    rows[(row[0], row[1])] = row
        existing[meas] = rows
    # a measure file missing rows for a method forces its recomputation
    for meas in measure_ids:
        for m in method_ids:
            if m not in todo and any((m, c) not in existing[meas] for c in cids):
                todo.append(m)
    todo = sorted(set(todo))

    computed: dict[str, list[MeasureValue]] = {m: [] for m in measure_ids}
    if todo:
        load_ids = sorted(set(todo) | ({strategy.replacement_method_id}
                                       if strategy.kind == "replacement" else set()))
        if strategy.kind == "repetition_wise":
            load_ids = list(method_ids)
        tasks = []
        for c in conditions:
            null = by_id.get(c.null_counterpart_id) if c.null_counterpart_id else None
            res = load_results(root, dgm_id, load_ids, [c.condition_id])[c.condition_id]
            null_res = (load_results(root, dgm_id, load_ids, [null.condition_id])[null.condition_id]
                        if null is not None else None)
            tasks.append((c, null, res, null_res, todo, list(measure_ids), strategy))
        for cell_values in pmap(_condition_cells, tasks, jobs):
            for mv in cell_values:
                computed[mv.measure_id].append(mv)

    out = {}
    for meas in measure_ids:
        keep_others = strategy.kind != "repetition_wise"
        rows = {k: v for k, v in existing[meas].items()
                if k[0] not in todo and (k[0] in method_ids or keep_others)}
        for mv in computed[meas]:
            rows[(mv.method_id, mv.condition_id)] = mv.row()
        ordered = [rows[k] for k in sorted(rows)]
        store.write_csv_file(measure_path(root, dgm_id, meas), MEASURE_HEADER, ordered, atomic=True)
        out[meas] = [_row_to_value(meas, r) for r in ordered]
        if not manifest.has("measure", meas):
            manifest = store.register_component(
                root, "measure",
                store.ComponentEntry(meas, MEASURE_VERSION, "active",
                                     f"livebench built-in measure {meas}",
                                     store.today(frozen_time)),
            )
    state[strategy.label] = {m: fingerprints[m] for m in sorted(fingerprints)}
    store.atomic_write_text(state_file, store.dump_json(state))
    return out


def _row_to_value(measure_id, row) -> MeasureValue:
    return MeasureValue(
        measure_id=measure_id,
        method_id=row[0],
        condition_id=row[1],
        value=None if row[2] == "" else float(row[2]),
        mcse=None if row[3] == "" else float(row[3]),
        n_used=int(row[4]),
        missingness_strategy=row[5],
    )


def read_measure_csv(path, measure_id: str) -> list[MeasureValue]:
    return [_row_to_value(measure_id, r) for r in store.read_csv_rows(path, MEASURE_HEADER)]
