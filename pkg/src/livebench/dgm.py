"""Step-selection SMD data-generating mechanism.

Every candidate study consumes exactly four uniforms from its repetition's
stream, in order: sample-size index, true-effect draw, sampling-error draw and
publication draw.  Candidate ``i`` therefore always sees uniforms
``4i .. 4i+3`` no matter how many candidates are generated per batch, which
keeps datasets independent of batching and of worker scheduling.

Generator
---------
``numpy.random.PCG64`` seeded through ``numpy.random.SeedSequence`` with the
256-bit SHA-256 key of ``root_seed|dgm_id|condition_id|repetition``.  Uniforms
are ``((raw >> 11) + 0.5) * 2**-53`` from the raw 64-bit outputs, normals are
inverse-CDF transforms (``scipy.special.ndtri``).  Only the bit generator's
raw stream is used, never numpy's distribution samplers, whose streams are
not guaranteed stable across numpy releases.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from itertools import product
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from . import store
from .parallel import pmap
from .errors import NotFound, RejectionOverflow, SchemaViolation

GENERATOR_NAME = "pcg64-seedsequence-sha256/inverse-cdf-v1"
UNIFORMS_PER_CANDIDATE = 4
MAX_CANDIDATES = 10**6
ALPHA_SELECTION = 0.05
Z_CRIT = float(ndtri(1 - ALPHA_SELECTION / 2))

CONDITIONS_HEADER = [
    "condition_id", "k", "mu", "tau", "selection_prob", "one_sided", "n_profile",
    "null_counterpart_id",
]


@dataclass(frozen=True)
class Condition:
    condition_id: str
    k: int
    mu: float
    tau: float
    selection_prob: float
    one_sided: bool
    n_profile: tuple[int, ...]
    null_counterpart_id: Optional[str] = None

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        if not 0.0 <= self.selection_prob <= 1.0:
            raise ValueError("selection_prob must lie in [0, 1]")
        if not self.n_profile or min(self.n_profile) < 4:
            raise ValueError("n_profile must be non-empty with entries >= 4")
        if self.null_counterpart_id is not None and self.mu == 0:
            raise ValueError("a null condition cannot have a null counterpart")


@dataclass(frozen=True)
class Dataset:
    condition_id: str
    repetition: int
    yi: np.ndarray
    sei: np.ndarray
    n_total: np.ndarray
    n_candidates: int = 0

    @property
    def k(self) -> int:
        return len(self.yi)

    def rows(self) -> list[store.StudyRow]:
        return [
            store.StudyRow(self.repetition, i + 1, float(y), float(s), int(n))
            for i, (y, s, n) in enumerate(zip(self.yi, self.sei, self.n_total))
        ]


@dataclass(frozen=True)
class SeedSpec:
    root_seed: int
    dgm_id: str
    condition_id: str
    repetition: int


def derive_seed(spec: SeedSpec) -> bytes:
    """SHA-256 of ``root_seed|dgm_id|condition_id|repetition`` (32 bytes)."""
    if not 0 <= spec.root_seed < 2**64:
        raise ValueError("root_seed must be an unsigned 64-bit integer")
    text = f"{spec.root_seed}|{spec.dgm_id}|{spec.condition_id}|{spec.repetition}"
    return hashlib.sha256(text.encode("utf-8")).digest()


class UniformStream:
    """Uniform (0, 1) doubles from a PCG64 stream keyed by a derived seed."""

    def __init__(self, key: bytes):
        seq = np.random.SeedSequence(int.from_bytes(key, "little"))
        self._bitgen = np.random.PCG64(seq)

    def uniforms(self, n: int) -> np.ndarray:
        raw = self._bitgen.random_raw(n)
        return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def rng_for(root_seed: int, dgm_id: str, condition_id: str, repetition: int) -> UniformStream:
    return UniformStream(derive_seed(SeedSpec(root_seed, dgm_id, condition_id, repetition)))


def smd_variance(d, n_per_group):
    """Large-sample variance of a standardized mean difference, equal arms."""
    n1 = n2 = n_per_group
    return (n1 + n2) / (n1 * n2) + d**2 / (2.0 * (n1 + n2))


def _candidates(u: np.ndarray, mu, tau, n_profile, one_sided, selection_prob):
    """Vectorized candidate generation from a (m, 4) block of uniforms."""
    profile = np.asarray(n_profile, dtype=np.int64)
    idx = np.minimum((u[:, 0] * len(profile)).astype(np.int64), len(profile) - 1)
    n = profile[idx]
    theta = mu + tau * ndtri(u[:, 1])
    d = theta + np.sqrt(smd_variance(theta, n)) * ndtri(u[:, 2])
    sei = np.sqrt(smd_variance(d, n))
    p = 2.0 * ndtr(-np.abs(d) / sei)
    significant = p <= ALPHA_SELECTION
    if one_sided:
        significant &= d > 0
    published = significant | (u[:, 3] < selection_prob)
    return d, sei, 2 * n, published, p


def simulate_study(rng: UniformStream, mu, tau, n_profile, one_sided, selection_prob=1.0):
    """Draw one candidate study.

    Returns ``(yi, sei, n_total, published, p_value)``.
    """
    if tau < 0:
        raise ValueError("tau must be >= 0")
    u = rng.uniforms(UNIFORMS_PER_CANDIDATE).reshape(1, UNIFORMS_PER_CANDIDATE)
    d, sei, n_total, published, p = _candidates(u, mu, tau, n_profile, one_sided, selection_prob)
    return float(d[0]), float(sei[0]), int(n_total[0]), bool(published[0]), float(p[0])


def simulate_condition(condition: Condition, repetition: int, root_seed: int,
                       dgm_id: str = "") -> Dataset:
    """Rejection-sample candidates until ``condition.k`` are published."""
    rng = rng_for(root_seed, dgm_id, condition.condition_id, repetition)
    k = condition.k
    ys, ss, ns = [], [], []
    kept = 0
    drawn = 0
    batch = max(64, 4 * k)
    while True:
        m = min(batch, MAX_CANDIDATES - drawn)
        if m <= 0:
            raise RejectionOverflow(
                f"condition {condition.condition_id}: fewer than {k} published studies "
                f"after {MAX_CANDIDATES} candidates"
            )
        u = rng.uniforms(m * UNIFORMS_PER_CANDIDATE).reshape(m, UNIFORMS_PER_CANDIDATE)
        d, sei, n_total, published, _ = _candidates(
            u, condition.mu, condition.tau, condition.n_profile,
            condition.one_sided, condition.selection_prob,
        )
        pos = np.flatnonzero(published)
        need = k - kept
        if len(pos) >= need:
            last = pos[need - 1]
            take = pos[:need]
            ys.append(d[take]); ss.append(sei[take]); ns.append(n_total[take])
            drawn += int(last) + 1
            break
        ys.append(d[pos]); ss.append(sei[pos]); ns.append(n_total[pos])
        kept += len(pos)
        drawn += m
        batch = min(batch * 2, 1 << 16)
    return Dataset(
        condition_id=condition.condition_id,
        repetition=repetition,
        yi=np.concatenate(ys),
        sei=np.concatenate(ss),
        n_total=np.concatenate(ns),
        n_candidates=drawn,
    )


def _fmt_num(x: float) -> str:
    return f"{x:g}"


def default_grid() -> list[Condition]:
    """Full factorial grid of 81 one-sided step-selection conditions.

    Emulates the design axes of published publication-bias simulation
    studies (study count, effect size, heterogeneity, selection strength); it
    does not reproduce any particular published DGM.
    """
    n_profile = (15, 25, 50, 100, 250)
    out = []
    for k, mu, tau, sp in product((10, 30, 60), (0.0, 0.2, 0.5), (0.0, 0.15, 0.3), (1.0, 0.3, 0.05)):
        def cid(m):
            return f"k{k}_mu{_fmt_num(m)}_tau{_fmt_num(tau)}_sp{_fmt_num(sp)}"
        out.append(Condition(
            condition_id=cid(mu), k=k, mu=mu, tau=tau, selection_prob=sp, one_sided=True,
            n_profile=n_profile, null_counterpart_id=None if mu == 0 else cid(0.0),
        ))
    return out


def check_grid(conditions: Sequence[Condition]) -> None:
    """Validate ids and null-counterpart links of a condition list."""
    by_id = {}
    for c in conditions:
        if not store._ID_RE.match(c.condition_id.replace(".", "")):
            raise SchemaViolation(f"condition id {c.condition_id!r} has invalid characters")
        if c.condition_id in by_id:
            raise SchemaViolation(f"duplicate condition id {c.condition_id!r}")
        by_id[c.condition_id] = c
    for c in conditions:
        if c.null_counterpart_id is None:
            continue
        null = by_id.get(c.null_counterpart_id)
        if null is None:
            raise SchemaViolation(
                f"{c.condition_id}: null counterpart {c.null_counterpart_id!r} not in grid"
            )
        if null.mu != 0 or (null.k, null.tau, null.selection_prob, null.one_sided, null.n_profile) != (
            c.k, c.tau, c.selection_prob, c.one_sided, c.n_profile
        ):
            raise SchemaViolation(
                f"{c.condition_id}: null counterpart must match in every field except mu"
            )


def write_conditions_csv(path, conditions: Sequence[Condition]) -> None:
    store.write_csv_file(
        path,
        CONDITIONS_HEADER,
        (
            [
                c.condition_id, str(c.k), store.format_float(c.mu), store.format_float(c.tau),
                store.format_float(c.selection_prob), store.format_bool(c.one_sided),
                ";".join(str(n) for n in c.n_profile), c.null_counterpart_id or "",
            ]
            for c in conditions
        ),
    )


def read_conditions_csv(path) -> list[Condition]:
    out = []
    for i, row in enumerate(store.read_csv_rows(path, CONDITIONS_HEADER), start=1):
        try:
            n_profile = tuple(int(x) for x in row[6].split(";"))
        except ValueError:
            raise SchemaViolation(f"bad n_profile {row[6]!r}", path, i, "n_profile") from None
        try:
            cond = Condition(
                condition_id=row[0],
                k=store._parse_int(row[1], path, i, "k", 2),
                mu=store._parse_float(row[2], path, i, "mu"),
                tau=store._parse_float(row[3], path, i, "tau"),
                selection_prob=store._parse_float(row[4], path, i, "selection_prob"),
                one_sided=store._parse_bool(row[5], path, i, "one_sided"),
                n_profile=n_profile,
                null_counterpart_id=row[7] or None,
            )
        except ValueError as exc:
            raise SchemaViolation(str(exc), path, i) from None
        out.append(cond)
    check_grid(out)
    return out


def dgm_meta(dgm_id: str, version: str, root_seed: int, repetitions: int) -> dict:
    return {
        "id": dgm_id,
        "version": version,
        "root_seed": root_seed,
        "repetitions": repetitions,
        "generator_name": GENERATOR_NAME,
    }


def read_dgm_meta(root, dgm_id: str) -> dict:
    path = store.dgm_dir(root, dgm_id) / "meta.json"
    if not path.exists():
        raise NotFound(f"dgm {dgm_id!r} has no meta.json (not simulated yet)")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def load_conditions(root, dgm_id: str) -> list[Condition]:
    path = store.dgm_dir(root, dgm_id) / "conditions.csv"
    if not path.exists():
        raise NotFound(f"dgm {dgm_id!r} has no conditions.csv")
    return read_conditions_csv(path)


def simulate_condition_rows(condition: Condition, repetitions: int, root_seed: int,
                            dgm_id: str) -> list[store.StudyRow]:
    rows = []
    for r in range(1, repetitions + 1):
        rows.extend(simulate_condition(condition, r, root_seed, dgm_id).rows())
    return rows


def _generate_one(args):
    root, dgm_id, condition, repetitions, root_seed = args
    rows = simulate_condition_rows(condition, repetitions, root_seed, dgm_id)
    path = store.data_path(root, dgm_id, condition.condition_id)
    store.write_data_csv(path, rows)
    return condition.condition_id, path.stat().st_size


def generate_dgm(root, dgm_id: str, conditions: Sequence[Condition], repetitions: int,
                 root_seed: int, force: bool = False, jobs: int = 1) -> dict[str, int]:
    """Write condition table, meta.json and one data file per condition.

    Returns the byte size of each data file keyed by condition id.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    manifest = store.load_manifest(root)
    entry = manifest.get("dgm", dgm_id)
    check_grid(conditions)
    if not force:
        existing = [c.condition_id for c in conditions
                    if store.data_path(root, dgm_id, c.condition_id).exists()]
        if existing:
            raise FileExistsError(
                f"data files already exist for {len(existing)} condition(s) of {dgm_id!r}; "
                "use force to overwrite"
            )
    ddir = store.dgm_dir(root, dgm_id)
    ddir.mkdir(parents=True, exist_ok=True)
    write_conditions_csv(ddir / "conditions.csv", conditions)
    store.atomic_write_text(
        ddir / "meta.json",
        store.dump_json(dgm_meta(dgm_id, entry.version, root_seed, repetitions)),
    )
    tasks = [(str(root), dgm_id, c, repetitions, root_seed) for c in conditions]
    return dict(pmap(_generate_one, tasks, jobs))


def read_datasets(root, dgm_id: str, condition_id: str) -> list[Dataset]:
    """Group a condition's data file into per-repetition datasets."""
    rows = store.read_data_csv(store.data_path(root, dgm_id, condition_id))
    by_rep: dict[int, list[store.StudyRow]] = {}
    for r in rows:
        by_rep.setdefault(r.repetition, []).append(r)
    out = []
    for rep in sorted(by_rep):
        rs = sorted(by_rep[rep], key=lambda r: r.study)
        out.append(Dataset(
            condition_id=condition_id,
            repetition=rep,
            yi=np.array([r.yi for r in rs]),
            sei=np.array([r.sei for r in rs]),
            n_total=np.array([r.n_total for r in rs], dtype=np.int64),
        ))
    return out
