"""Built-in meta-analytic estimators, unadjusted and bias-adjusted.

Each estimator takes effect sizes ``yi`` and standard errors ``sei`` and
returns an :class:`Estimate`, or raises :class:`NonConvergence` carrying a
short note.  CIs and p-values always come from one reference distribution
(normal, or t with ``df`` degrees of freedom), so ``p < alpha`` exactly when
the ``1 - alpha`` interval excludes zero.
"""

from __future__ import annotations

import math
import platform
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy
from scipy.optimize import minimize
from scipy.special import log_ndtr, ndtr, ndtri, stdtr, stdtrit

from . import store
from .dgm import Dataset, read_datasets, load_conditions
from .errors import InsufficientStudies, NonConvergence
from .parallel import pmap

SE_FLOOR = 1e-12
Z_975 = float(ndtri(0.975))


@dataclass
class Estimate:
    estimate: float
    se: float
    ci_lower: float
    ci_upper: float
    p_value: float
    df: Optional[float] = None
    aux: dict = field(default_factory=dict)
    note: str = ""


@dataclass(frozen=True)
class MethodSpec:
    id: str
    version: str = "1.0.0"
    alpha: float = 0.05
    options: dict = field(default_factory=dict)


def _finish(est, se, alpha, df=None, aux=None, note=""):
    """Build an Estimate with CI and two-sided p from one reference distribution."""
    if not (math.isfinite(est) and math.isfinite(se)):
        raise NonConvergence("non-finite estimate")
    # rounding residue from exactly-zero residuals also counts as zero variance
    if se < SE_FLOOR:
        se = SE_FLOOR
        note = note or "zero variance: se floored"
    z = abs(est) / se
    if df is None:
        crit = float(ndtri(1 - alpha / 2))
        p = float(2 * ndtr(-z))
    else:
        crit = float(stdtrit(df, 1 - alpha / 2))
        p = float(2 * stdtr(df, -z))
    half = crit * se
    lo, hi = est - half, est + half
    # rounding can push the endpoints across est when se is floored
    lo, hi = min(lo, est), max(hi, est)
    return Estimate(est, se, lo, hi, min(p, 1.0), df, aux or {}, note)


def _prep(yi, sei, minimum):
    yi = np.asarray(yi, dtype=float)
    sei = np.asarray(sei, dtype=float)
    if yi.shape != sei.shape or yi.ndim != 1:
        raise ValueError("yi and sei must be 1-d arrays of equal length")
    if len(yi) < minimum:
        raise InsufficientStudies(f"insufficient studies: k={len(yi)} < {minimum}")
    if not (np.all(np.isfinite(yi)) and np.all(np.isfinite(sei)) and np.all(sei > 0)):
        raise NonConvergence("invalid input: non-finite yi or non-positive sei")
    return yi, sei


def mean_unweighted(yi, sei, alpha=0.05):
    yi, sei = _prep(yi, sei, 2)
    k = len(yi)
    est = float(np.mean(yi))
    se = float(np.std(yi, ddof=1) / math.sqrt(k))
    return _finish(est, se, alpha, df=k - 1)


def _fe(yi, sei):
    w = 1.0 / sei**2
    sw = w.sum()
    est = float(np.dot(w, yi) / sw)
    return est, w, sw


def fixed_effect(yi, sei, alpha=0.05):
    yi, sei = _prep(yi, sei, 2)
    est, _, sw = _fe(yi, sei)
    return _finish(est, math.sqrt(1.0 / sw), alpha)


def dl_tau2(yi, sei) -> float:
    """DerSimonian-Laird between-study variance, truncated at zero."""
    est, w, sw = _fe(yi, sei)
    q = float(np.dot(w, (yi - est) ** 2))
    c = sw - float(np.dot(w, w)) / sw
    return max(0.0, (q - (len(yi) - 1)) / c)


def random_effects_dl_kh(yi, sei, alpha=0.05):
    yi, sei = _prep(yi, sei, 2)
    k = len(yi)
    tau2 = dl_tau2(yi, sei)
    w = 1.0 / (sei**2 + tau2)
    sw = w.sum()
    est = float(np.dot(w, yi) / sw)
    var_kh = float(np.dot(w, (yi - est) ** 2)) / (k - 1) / sw
    return _finish(est, math.sqrt(var_kh), alpha, df=k - 1, aux={"tau2_hat": tau2})


def wls_stanley(yi, sei, alpha=0.05):
    yi, sei = _prep(yi, sei, 2)
    k = len(yi)
    est, w, sw = _fe(yi, sei)
    mse = float(np.dot(w, (yi - est) ** 2)) / (k - 1)
    se = math.sqrt(1.0 / sw) * math.sqrt(mse)
    return _finish(est, se, alpha, df=k - 1, aux={"mse": mse})


def _wls_intercept(yi, sei, x, alpha):
    """Weighted regression of yi on [1, x] with weights 1/sei^2; intercept inference."""
    k = len(yi)
    if np.ptp(x) <= 1e-12 * max(1.0, float(np.max(np.abs(x)))):
        raise NonConvergence("regressor collinear")
    sw = 1.0 / sei
    design = np.column_stack([np.ones(k), x]) * sw[:, None]
    target = yi * sw
    q, r = np.linalg.qr(design)
    coef = np.linalg.solve(r, q.T @ target)
    resid = target - design @ coef
    df = k - 2
    sigma2 = float(resid @ resid) / df
    rinv = np.linalg.inv(r)
    cov = sigma2 * (rinv @ rinv.T)
    se = math.sqrt(max(cov[0, 0], 0.0))
    return _finish(float(coef[0]), se, alpha, df=df, aux={"slope": float(coef[1])})


def pet(yi, sei, alpha=0.05):
    yi, sei = _prep(yi, sei, 3)
    return _wls_intercept(yi, sei, sei, alpha)


def peese(yi, sei, alpha=0.05):
    yi, sei = _prep(yi, sei, 4)
    return _wls_intercept(yi, sei, sei**2, alpha)


def pet_peese(yi, sei, alpha=0.05, pet_peese_switch_alpha=0.05):
    """PET, switching to PEESE when the PET intercept is significantly positive."""
    yi, sei = _prep(yi, sei, 4)
    first = pet(yi, sei, alpha)
    t_stat = first.estimate / first.se
    p_one = float(stdtr(first.df, -t_stat))
    if p_one < pet_peese_switch_alpha:
        out = peese(yi, sei, alpha)
        branch = "peese"
    else:
        out = first
        branch = "pet"
    out.aux.update(branch=branch, pet_t=t_stat, pet_p_one_sided=p_one)
    return out


def trim_fill(yi, sei, alpha=0.05, max_iter=50):
    """Trim and fill with the L0 estimator, imputing on the left side.

    Centres are random-effects (DerSimonian-Laird, Knapp-Hartung) estimates.
    """
    yi, sei = _prep(yi, sei, 3)
    n = len(yi)
    order = np.argsort(yi, kind="stable")
    ys, ss = yi[order], sei[order]
    l0 = 0
    for _ in range(max_iter):
        keep = n - l0
        if keep < 2:
            raise NonConvergence("trim and fill: trimmed set too small")
        center = random_effects_dl_kh(ys[:keep], ss[:keep], alpha).estimate
        dev = ys - center
        ranks = _rank_average(np.abs(dev))
        t_pos = float(ranks[dev > 0].sum())
        new = max(0, math.floor((4 * t_pos - n * (n + 1)) / (2 * n - 1) + 0.5))
        if new == l0:
            break
        l0 = new
    else:
        raise NonConvergence("trim and fill: L0 did not stabilize")
    if l0 > 0:
        center = random_effects_dl_kh(ys[: n - l0], ss[: n - l0], alpha).estimate
        fill_y = 2 * center - ys[n - l0:]
        aug_y = np.concatenate([yi, fill_y])
        aug_s = np.concatenate([sei, ss[n - l0:]])
    else:
        aug_y, aug_s = yi, sei
    out = random_effects_dl_kh(aug_y, aug_s, alpha)
    out.aux["n_imputed"] = int(l0)
    return out


def _rank_average(x):
    from scipy.stats import rankdata

    return rankdata(x, method="average")


def waap_wls(yi, sei, alpha=0.05):
    yi, sei = _prep(yi, sei, 3)
    base = wls_stanley(yi, sei, alpha)
    adequate = sei <= abs(base.estimate) / 2.8
    n_adequate = int(adequate.sum())
    if n_adequate >= 2:
        out = wls_stanley(yi[adequate], sei[adequate], alpha)
        out.aux["n_adequate"] = n_adequate
        return out
    base.aux["n_adequate"] = n_adequate
    base.note = "fallback: <2 adequately powered"
    return base


# ---------------------------------------------------------------------------
# Three-parameter selection model
# ---------------------------------------------------------------------------


def sm_loglik(mu, tau2, omega, yi, sei, fixed_omega=False):
    """Log-likelihood of the one-cutpoint step selection model.

    Studies with two-sided p <= .05 have relative publication weight 1,
    the rest weight ``omega``.
    """
    s2 = sei**2 + tau2
    s = np.sqrt(s2)
    c = Z_975 * sei
    sig = np.abs(yi) >= c
    lo = (-c - mu) / s
    hi = (c - mu) / s
    # probability mass of the non-significant band under N(mu, s^2)
    p_mid = ndtr(hi) - ndtr(lo)
    p_sig = ndtr(-hi) + ndtr(lo)
    z = (yi - mu) / s
    ll = -0.5 * z**2 - 0.5 * math.log(2 * math.pi) - np.log(s)
    if fixed_omega:
        return float(ll.sum())
    ll = ll + np.where(sig, 0.0, math.log(omega)) - np.log(p_sig + omega * p_mid)
    return float(ll.sum())


def _sm_objective(theta, yi, sei, scale, fixed_omega):
    m, t, w = theta
    mu = m * scale
    tau2 = scale**2 * math.exp(min(t, 50.0))
    omega = math.exp(min(max(w, -50.0), 50.0))
    val = -sm_loglik(mu, tau2, omega, yi, sei, fixed_omega)
    return val if math.isfinite(val) else math.inf


def _hessian(f, x, h):
    n = len(x)
    hmat = np.empty((n, n))
    f0 = f(x)
    for i in range(n):
        ei = np.zeros(n); ei[i] = h
        hmat[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / h**2
        for j in range(i + 1, n):
            ej = np.zeros(n); ej[j] = h
            v = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * h * h)
            hmat[i, j] = hmat[j, i] = v
    return hmat


# tau2 below this fraction of the typical sampling variance counts as zero
_TAU2_BOUNDARY = math.log(1e-8)


def selection_model_3psm(yi, sei, alpha=0.05, fixed_omega=False, max_iter=2000, tol=1e-8):
    """Maximum-likelihood step-function selection model.

    Optimizes over (mu, log tau^2, log omega) by Nelder-Mead from three
    starting values of mu (fixed-effect, random-effects, zero).  The standard
    error of mu comes from the inverse observed information, computed by
    central finite differences.  ``fixed_omega`` pins omega at 1.
    """
    yi, sei = _prep(yi, sei, 4)
    sig = np.abs(yi) >= Z_975 * sei
    n_sig = int(sig.sum())
    if not fixed_omega and min(n_sig, len(yi) - n_sig) < 2:
        raise NonConvergence("weights unidentified")
    # work in units of the typical standard error so the search is scale free
    scale = float(math.sqrt(np.mean(sei**2)))
    fe_est = _fe(yi, sei)[0]
    tau2_dl = dl_tau2(yi, sei)
    re_est = random_effects_dl_kh(yi, sei, alpha).estimate
    t0 = math.log(max(tau2_dl / scale**2, 0.01))
    dims = 2 if fixed_omega else 3

    # standardized data keep the objective's magnitude, and hence the rounding
    # error of the finite-difference Hessian, independent of the effect scale
    ys, ss = yi / scale, sei / scale
    offset = len(yi) * math.log(scale)

    def objective(x):
        full = np.append(x, 0.0) if fixed_omega else x
        return _sm_objective(full, ys, ss, 1.0, fixed_omega)

    best = None
    start_values = []
    for m0 in (fe_est / scale, re_est / scale, 0.0):
        x0 = np.array([m0, t0, 0.0][:dims])
        simplex = np.vstack([x0] + [x0 + 0.5 * np.eye(dims)[i] for i in range(dims)])
        start_values.append(objective(x0))
        res = minimize(
            objective, x0, method="Nelder-Mead",
            options={"maxiter": max_iter, "xatol": tol, "fatol": tol,
                     "initial_simplex": simplex},
        )
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise NonConvergence("optimizer non-finite")
    # one restart from the optimum with a fresh simplex; Nelder-Mead can stall
    # on a collapsed simplex along the flat log tau^2 direction
    x0 = best.x
    simplex = np.vstack([x0] + [x0 + 0.05 * np.eye(dims)[i] for i in range(dims)])
    res = minimize(
        objective, x0, method="Nelder-Mead",
        options={"maxiter": max_iter, "xatol": tol, "fatol": tol, "initial_simplex": simplex},
    )
    if np.isfinite(res.fun) and res.fun <= best.fun:
        best = res
    x = best.x
    # nuisance coordinates sitting on a boundary carry no information about mu
    free = [0] + [i for i in range(1, dims)
                  if not (i == 1 and x[1] < _TAU2_BOUNDARY) and not (i == 2 and abs(x[2]) > 20)]

    def sub(xf):
        full = x.copy()
        full[free] = xf
        return objective(full)

    # h = 1e-3 balances truncation error against rounding noise along the flat
    # log tau^2 direction (curvature there can be ~1e-3)
    hmat = _hessian(sub, x[free], 1e-3)
    if not np.all(np.isfinite(hmat)):
        raise NonConvergence("optimizer non-finite")
    try:
        cov = np.linalg.inv(hmat)
    except np.linalg.LinAlgError:
        raise NonConvergence("information matrix singular") from None
    var_m = cov[0, 0]
    if not (np.isfinite(var_m) and var_m > 0):
        raise NonConvergence("information matrix not positive definite")
    mu_hat = float(x[0] * scale)
    tau2_hat = 0.0 if x[1] < _TAU2_BOUNDARY else float(scale**2 * math.exp(x[1]))
    omega_hat = 1.0 if fixed_omega else float(math.exp(x[2]))
    aux = {
        "tau2_hat": tau2_hat,
        "omega_hat": omega_hat,
        "loglik": -float(best.fun) - offset,
        "start_logliks": [-v - offset for v in start_values],
        "optimizer_success": bool(best.success),
    }
    return _finish(mu_hat, math.sqrt(var_m) * scale, alpha, aux=aux)


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

ESTIMATORS: dict[str, Callable] = {
    "mean": mean_unweighted,
    "fe": fixed_effect,
    "re_kh": random_effects_dl_kh,
    "wls": wls_stanley,
    "pet": pet,
    "peese": peese,
    "pet_peese": pet_peese,
    "trim_fill": trim_fill,
    "sm_3p": selection_model_3psm,
    "waap_wls": waap_wls,
}
METHOD_IDS = tuple(ESTIMATORS)
METHOD_VERSION = "1.0.0"

_OPTION_TYPES = {
    "pet_peese": {"pet_peese_switch_alpha": float},
    "trim_fill": {"max_iter": int},
    "sm_3p": {"fixed_omega": lambda v: str(v).lower() in ("1", "true", "yes"),
              "max_iter": int, "tol": float},
}


def parse_options(method_id: str, pairs) -> dict:
    """Turn ``key=value`` strings into typed keyword options for a method."""
    allowed = {"alpha": float, **_OPTION_TYPES.get(method_id, {})}
    out = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep or key not in allowed:
            raise ValueError(
                f"unknown option {pair!r} for {method_id}; allowed: {', '.join(sorted(allowed))}"
            )
        out[key] = allowed[key](value)
    return out


def environment_string() -> str:
    return (
        f"python {platform.python_version()}; numpy {np.__version__}; "
        f"scipy {scipy.__version__}"
    )


def estimate(spec: MethodSpec, yi, sei) -> Estimate:
    fn = ESTIMATORS[spec.id]
    return fn(yi, sei, alpha=spec.alpha, **spec.options)


def apply_method(spec: MethodSpec, ds: Dataset) -> store.ResultRecord:
    """Run one method on one dataset; every failure becomes a non-converged record."""
    try:
        est = estimate(spec, ds.yi, ds.sei)
    except NonConvergence as exc:
        return store.ResultRecord.failed(ds.repetition, exc.note)
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        return store.ResultRecord.failed(ds.repetition, type(exc).__name__)
    return store.ResultRecord(
        repetition=ds.repetition,
        estimate=est.estimate,
        se=est.se,
        ci_lower=est.ci_lower,
        ci_upper=est.ci_upper,
        p_value=est.p_value,
        converged=True,
        note=est.note,
    )


def _run_condition(args):
    root, dgm_id, spec, condition_id, force = args
    path = store.results_path(root, dgm_id, spec.id, condition_id)
    records = [apply_method(spec, ds) for ds in read_datasets(root, dgm_id, condition_id)]
    store.write_results_csv(path, records, force=force)
    n_conv = sum(r.converged for r in records)
    return condition_id, n_conv, len(records)


def run_method(root, dgm_id: str, spec: MethodSpec, jobs: int = 1, force: bool = False):
    """Apply a method to every repetition of every condition of a DGM.

    Returns ``[(condition_id, n_converged, n_repetitions), ...]`` in condition
    order.
    """
    if spec.id not in ESTIMATORS:
        raise KeyError(f"unknown method {spec.id!r}; registered: {', '.join(METHOD_IDS)}")
    conditions = load_conditions(root, dgm_id)
    tasks = [(str(root), dgm_id, spec, c.condition_id, force) for c in conditions]
    return pmap(_run_condition, tasks, jobs)
