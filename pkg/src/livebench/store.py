"""File-backed benchmark repository.

Directory layout under a benchmark root::

    manifest.json
    dgms/<dgm_id>/conditions.csv, meta.json
    data/<dgm_id>/cond-<condition_id>.csv
    results/<dgm_id>/<method_id>/cond-<condition_id>.csv
    measures/<dgm_id>/<measure_id>.csv
    methods/<method_id>/meta.json

All CSV files are UTF-8 with LF line endings.  Floats are written as the
shortest decimal string that parses back to the same double (``repr``), so a
read followed by a write reproduces the file byte for byte.
"""

from __future__ import annotations

import csv
import datetime as _dt
import io
import json
import math
import os
import re
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

from .errors import AlreadyInitialized, DuplicateComponent, NotFound, SchemaViolation

SCHEMA_VERSION = "1.0.0"
KINDS = ("dgm", "method", "measure")
STATUSES = ("active", "deprecated")
SUBDIRS = ("dgms", "data", "results", "measures", "methods")

DATA_HEADER = ["repetition", "study", "yi", "sei", "n_total"]
RESULTS_HEADER = [
    "repetition", "estimate", "se", "ci_lower", "ci_upper", "p_value", "converged", "note",
]
MANIFEST_KEYS = ["benchmark_name", "schema_version", "dgms", "methods", "measures"]
ENTRY_KEYS = ["id", "version", "status", "provenance", "added_at"]

_ID_RE = re.compile(r"^[a-z0-9_-]+$")
_SEMVER_RE = re.compile(r"^(0|[1-9]\d*)\.(0|[1-9]\d*)\.(0|[1-9]\d*)$")


def parse_semver(version: str) -> tuple[int, int, int]:
    m = _SEMVER_RE.match(version)
    if m is None:
        raise SchemaViolation(f"not a MAJOR.MINOR.PATCH version: {version!r}")
    return tuple(int(g) for g in m.groups())


def format_float(x: float) -> str:
    """Shortest round-trip decimal representation of a double."""
    return repr(float(x))


def today(frozen: Optional[str] = None) -> str:
    return frozen if frozen is not None else _dt.date.today().isoformat()


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComponentEntry:
    id: str
    version: str
    status: str = "active"
    provenance: str = ""
    added_at: str = ""

    def __post_init__(self):
        if not _ID_RE.match(self.id):
            raise SchemaViolation(f"component id {self.id!r} must match [a-z0-9_-]+")
        if self.status not in STATUSES:
            raise SchemaViolation(f"component status {self.status!r} not in {STATUSES}")
        parse_semver(self.version)

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in ENTRY_KEYS}


@dataclass(frozen=True)
class Manifest:
    benchmark_name: str
    schema_version: str = SCHEMA_VERSION
    dgms: tuple[ComponentEntry, ...] = ()
    methods: tuple[ComponentEntry, ...] = ()
    measures: tuple[ComponentEntry, ...] = ()

    def __post_init__(self):
        parse_semver(self.schema_version)
        for kind in KINDS:
            ids = [e.id for e in self.entries(kind)]
            if len(ids) != len(set(ids)):
                raise SchemaViolation(f"duplicate {kind} ids in manifest")

    def entries(self, kind: str) -> tuple[ComponentEntry, ...]:
        return getattr(self, _plural(kind))

    def get(self, kind: str, id: str) -> ComponentEntry:
        for e in self.entries(kind):
            if e.id == id:
                return e
        raise NotFound(f"no {kind} with id {id!r}")

    def has(self, kind: str, id: str) -> bool:
        return any(e.id == id for e in self.entries(kind))

    def active_ids(self, kind: str, include_deprecated: bool = False) -> list[str]:
        return [
            e.id for e in self.entries(kind)
            if include_deprecated or e.status == "active"
        ]

    def to_json(self) -> dict:
        return {
            "benchmark_name": self.benchmark_name,
            "schema_version": self.schema_version,
            "dgms": [e.to_json() for e in self.dgms],
            "methods": [e.to_json() for e in self.methods],
            "measures": [e.to_json() for e in self.measures],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Manifest":
        if sorted(obj) != sorted(MANIFEST_KEYS):
            raise SchemaViolation(f"manifest keys must be exactly {MANIFEST_KEYS}")
        lists = {}
        for kind in KINDS:
            entries = []
            for raw in obj[_plural(kind)]:
                if sorted(raw) != sorted(ENTRY_KEYS):
                    raise SchemaViolation(f"component entry keys must be exactly {ENTRY_KEYS}")
                entries.append(ComponentEntry(**raw))
            lists[_plural(kind)] = tuple(entries)
        return cls(obj["benchmark_name"], obj["schema_version"], **lists)


def _plural(kind: str) -> str:
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    return kind + "s"


def manifest_path(root) -> Path:
    return Path(root) / "manifest.json"


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to a temp file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, ensure_ascii=False) + "\n"


def save_manifest(root, manifest: Manifest) -> None:
    atomic_write_text(manifest_path(root), dump_json(manifest.to_json()))


def load_manifest(root) -> Manifest:
    path = manifest_path(root)
    if not path.exists():
        raise NotFound(f"no benchmark at {root} (missing manifest.json)")
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaViolation(f"invalid JSON: {exc}", path=path) from exc
    return Manifest.from_json(obj)


def init_benchmark(root, name: str) -> Manifest:
    root = Path(root)
    if manifest_path(root).exists():
        raise AlreadyInitialized(f"{root} already contains a manifest")
    for sub in SUBDIRS:
        (root / sub).mkdir(parents=True, exist_ok=True)
    manifest = Manifest(benchmark_name=name)
    save_manifest(root, manifest)
    return manifest


def register_component(root, kind: str, entry: ComponentEntry) -> Manifest:
    """Add ``entry`` to the manifest, or bump the version of an existing entry.

    A re-registration must carry a strictly greater version; the previous
    status is kept.
    """
    manifest = load_manifest(root)
    entries = list(manifest.entries(kind))
    for i, old in enumerate(entries):
        if old.id == entry.id:
            if parse_semver(entry.version) <= parse_semver(old.version):
                raise DuplicateComponent(
                    f"{kind} {entry.id!r} already registered at version {old.version}"
                )
            entries[i] = replace(entry, status=old.status)
            break
    else:
        entries.append(entry)
    manifest = replace(manifest, **{_plural(kind): tuple(entries)})
    save_manifest(root, manifest)
    return manifest


def retire_component(root, kind: str, id: str) -> Manifest:
    """Mark a component deprecated.  Never deletes files."""
    manifest = load_manifest(root)
    entries = list(manifest.entries(kind))
    for i, old in enumerate(entries):
        if old.id == id:
            if old.status != "active":
                raise NotFound(f"{kind} {id!r} is not active")
            entries[i] = replace(old, status="deprecated")
            break
    else:
        raise NotFound(f"no {kind} with id {id!r}")
    manifest = replace(manifest, **{_plural(kind): tuple(entries)})
    save_manifest(root, manifest)
    return manifest


def write_method_meta(root, entry: ComponentEntry, environment: str) -> None:
    obj = entry.to_json()
    obj["environment"] = environment
    atomic_write_text(Path(root) / "methods" / entry.id / "meta.json", dump_json(obj))


# ---------------------------------------------------------------------------
# Paths
# ---------------------------------------------------------------------------


def data_path(root, dgm_id: str, condition_id: str) -> Path:
    return Path(root) / "data" / dgm_id / f"cond-{condition_id}.csv"


def results_path(root, dgm_id: str, method_id: str, condition_id: str) -> Path:
    return Path(root) / "results" / dgm_id / method_id / f"cond-{condition_id}.csv"


def dgm_dir(root, dgm_id: str) -> Path:
    return Path(root) / "dgms" / dgm_id


def measures_dir(root, dgm_id: str) -> Path:
    return Path(root) / "measures" / dgm_id


# ---------------------------------------------------------------------------
# Row types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StudyRow:
    repetition: int
    study: int
    yi: float
    sei: float
    n_total: int


@dataclass(frozen=True)
class ResultRecord:
    repetition: int
    estimate: Optional[float] = None
    se: Optional[float] = None
    ci_lower: Optional[float] = None
    ci_upper: Optional[float] = None
    p_value: Optional[float] = None
    converged: bool = False
    note: str = ""

    @classmethod
    def failed(cls, repetition: int, note: str) -> "ResultRecord":
        return cls(repetition=repetition, converged=False, note=note)

    def check(self) -> None:
        """Raise ``SchemaViolation`` if the record breaks its invariants."""
        if self.repetition < 1:
            raise SchemaViolation("repetition must be >= 1", column="repetition")
        values = (self.estimate, self.se, self.ci_lower, self.ci_upper, self.p_value)
        if not self.converged:
            for name, v in zip(RESULTS_HEADER[1:6], values):
                if v is not None:
                    raise SchemaViolation("must be empty when converged is false", column=name)
            return
        for name in ("estimate", "ci_lower", "ci_upper"):
            if getattr(self, name) is None:
                raise SchemaViolation("required when converged is true", column=name)
        if math.isnan(self.estimate):
            raise SchemaViolation("estimate is NaN", column="estimate")
        if not self.ci_lower <= self.estimate <= self.ci_upper:
            raise SchemaViolation("ci_lower <= estimate <= ci_upper violated", column="ci_lower")
        if self.se is not None and not self.se > 0:
            raise SchemaViolation("se must be > 0", column="se")
        if self.p_value is not None and not 0.0 <= self.p_value <= 1.0:
            raise SchemaViolation("p_value must lie in [0, 1]", column="p_value")


# ---------------------------------------------------------------------------
# CSV plumbing
# ---------------------------------------------------------------------------


def _csv_text(header: list[str], rows: Iterable[list[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def write_csv_file(path, header, rows, force: bool = True, atomic: bool = False) -> None:
    path = Path(path)
    if not force and path.exists():
        raise FileExistsError(f"{path} exists; pass force to overwrite")
    text = _csv_text(header, rows)
    if atomic:
        atomic_write_text(path, text)
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def read_csv_rows(path, header: list[str]) -> list[list[str]]:
    """Read a CSV file, check its header, and return the data rows."""
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            raise SchemaViolation("empty file (no header)", path=path) from None
        if got != header:
            missing = [c for c in header if c not in got]
            extra = [c for c in got if c not in header]
            detail = []
            if missing:
                detail.append("missing column(s) " + ", ".join(missing))
            if extra:
                detail.append("unexpected column(s) " + ", ".join(extra))
            if not detail:
                detail.append("columns out of order")
            raise SchemaViolation(
                f"malformed header {got}: " + "; ".join(detail),
                path=path, column=(missing or extra or [None])[0],
            )
        rows = []
        for i, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise SchemaViolation(
                    f"expected {len(header)} fields, found {len(row)}", path=path, row=i
                )
            rows.append(row)
    return rows


def _parse_int(text, path, row, column, minimum):
    try:
        value = int(text)
    except ValueError:
        raise SchemaViolation(f"not an integer: {text!r}", path, row, column) from None
    if value < minimum:
        raise SchemaViolation(f"must be >= {minimum}, got {value}", path, row, column)
    return value


def _parse_float(text, path, row, column, finite=True):
    try:
        value = float(text)
    except ValueError:
        raise SchemaViolation(f"not a number: {text!r}", path, row, column) from None
    if math.isnan(value) or (finite and math.isinf(value)):
        raise SchemaViolation(f"non-finite value {text!r}", path, row, column)
    return value


def _parse_optional_float(text, path, row, column):
    if text == "":
        return None
    return _parse_float(text, path, row, column, finite=False)


def _parse_bool(text, path, row, column):
    if text == "true":
        return True
    if text == "false":
        return False
    raise SchemaViolation(f"expected true/false, got {text!r}", path, row, column)


def format_bool(value: bool) -> str:
    return "true" if value else "false"


# ---------------------------------------------------------------------------
# Data files
# ---------------------------------------------------------------------------


def _check_study_rows(rows: list[StudyRow], path=None) -> None:
    seen = {}
    for i, r in enumerate(rows, start=1):
        if r.repetition < 1:
            raise SchemaViolation("must be >= 1", path, i, "repetition")
        if r.study < 1:
            raise SchemaViolation("must be >= 1", path, i, "study")
        if not (math.isfinite(r.yi)):
            raise SchemaViolation("non-finite value", path, i, "yi")
        if not (math.isfinite(r.sei) and r.sei > 0):
            raise SchemaViolation(f"sei must be > 0, got {r.sei!r}", path, i, "sei")
        if r.n_total < 4:
            raise SchemaViolation(f"n_total must be >= 4, got {r.n_total}", path, i, "n_total")
        studies = seen.setdefault(r.repetition, set())
        if r.study in studies:
            raise SchemaViolation(
                f"duplicate (repetition, study) = ({r.repetition}, {r.study})", path, i, "study"
            )
        studies.add(r.study)
    for rep, studies in seen.items():
        if studies != set(range(1, len(studies) + 1)):
            raise SchemaViolation(
                f"study indices of repetition {rep} are not contiguous 1..k", path, None, "study"
            )


def write_data_csv(path, rows: list[StudyRow], force: bool = True) -> None:
    _check_study_rows(rows)
    write_csv_file(
        path,
        DATA_HEADER,
        (
            [str(r.repetition), str(r.study), format_float(r.yi), format_float(r.sei), str(r.n_total)]
            for r in rows
        ),
        force=force,
    )


def read_data_csv(path) -> list[StudyRow]:
    out = []
    for i, row in enumerate(read_csv_rows(path, DATA_HEADER), start=1):
        out.append(
            StudyRow(
                repetition=_parse_int(row[0], path, i, "repetition", 1),
                study=_parse_int(row[1], path, i, "study", 1),
                yi=_parse_float(row[2], path, i, "yi"),
                sei=_parse_float(row[3], path, i, "sei"),
                n_total=_parse_int(row[4], path, i, "n_total", 4),
            )
        )
    _check_study_rows(out, path)
    return out


# ---------------------------------------------------------------------------
# Result files
# ---------------------------------------------------------------------------


def _opt(x: Optional[float]) -> str:
    return "" if x is None else format_float(x)


def write_results_csv(path, records: list[ResultRecord], force: bool = True) -> None:
    for i, r in enumerate(records, start=1):
        try:
            r.check()
        except SchemaViolation as exc:
            raise SchemaViolation(exc.detail, path, i, exc.column) from None
    write_csv_file(
        path,
        RESULTS_HEADER,
        (
            [
                str(r.repetition), _opt(r.estimate), _opt(r.se), _opt(r.ci_lower),
                _opt(r.ci_upper), _opt(r.p_value), format_bool(r.converged), r.note,
            ]
            for r in records
        ),
        force=force,
    )


def read_results_csv(path) -> list[ResultRecord]:
    out = []
    reps = set()
    for i, row in enumerate(read_csv_rows(path, RESULTS_HEADER), start=1):
        rec = ResultRecord(
            repetition=_parse_int(row[0], path, i, "repetition", 1),
            estimate=_parse_optional_float(row[1], path, i, "estimate"),
            se=_parse_optional_float(row[2], path, i, "se"),
            ci_lower=_parse_optional_float(row[3], path, i, "ci_lower"),
            ci_upper=_parse_optional_float(row[4], path, i, "ci_upper"),
            p_value=_parse_optional_float(row[5], path, i, "p_value"),
            converged=_parse_bool(row[6], path, i, "converged"),
            note=row[7],
        )
        try:
            rec.check()
        except SchemaViolation as exc:
            raise SchemaViolation(exc.detail, path, i, exc.column) from None
        if rec.repetition in reps:
            raise SchemaViolation(f"duplicate repetition {rec.repetition}", path, i, "repetition")
        reps.add(rec.repetition)
        out.append(rec)
    return out


# ---------------------------------------------------------------------------
# Submission validation
# ---------------------------------------------------------------------------


@dataclass
class ConditionReport:
    condition_id: str
    ok: bool
    expected_rows: int
    found_rows: int
    convergence_rate: Optional[float]
    messages: list[str] = field(default_factory=list)


@dataclass
class ValidationReport:
    dgm_id: str
    method_id: str
    conditions: list[ConditionReport]

    @property
    def passed(self) -> bool:
        return bool(self.conditions) and all(c.ok for c in self.conditions)

    def failures(self) -> list[ConditionReport]:
        return [c for c in self.conditions if not c.ok]

    def format(self) -> str:
        lines = [f"validation of method {self.method_id!r} on dgm {self.dgm_id!r}"]
        for c in self.conditions:
            rate = "-" if c.convergence_rate is None else f"{c.convergence_rate:.3f}"
            status = "ok" if c.ok else "FAIL"
            lines.append(
                f"  {c.condition_id}: {status} rows {c.found_rows}/{c.expected_rows} "
                f"convergence {rate}"
            )
            lines.extend(f"    {m}" for m in c.messages)
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)

    def to_json(self) -> dict:
        return {
            "dgm_id": self.dgm_id,
            "method_id": self.method_id,
            "passed": self.passed,
            "conditions": [asdict(c) for c in self.conditions],
        }


def data_repetitions(path) -> list[int]:
    """Sorted distinct repetition indices present in a data file."""
    return sorted({r.repetition for r in read_data_csv(path)})


def validate_submission(root, dgm_id: str, method_id: str) -> ValidationReport:
    from .dgm import read_conditions_csv

    conditions = read_conditions_csv(dgm_dir(root, dgm_id) / "conditions.csv")
    reports = []
    for cond in conditions:
        cid = cond.condition_id
        messages = []
        try:
            reps = data_repetitions(data_path(root, dgm_id, cid))
        except (OSError, SchemaViolation) as exc:
            reports.append(ConditionReport(cid, False, 0, 0, None, [f"data file: {exc}"]))
            continue
        rpath = results_path(root, dgm_id, method_id, cid)
        if not rpath.exists():
            reports.append(
                ConditionReport(cid, False, len(reps), 0, None,
                                [f"missing results file for condition {cid}: {rpath}"])
            )
            continue
        try:
            records = read_results_csv(rpath)
        except SchemaViolation as exc:
            reports.append(ConditionReport(cid, False, len(reps), 0, None, [f"schema: {exc}"]))
            continue
        got = sorted(r.repetition for r in records)
        if len(records) != len(reps):
            messages.append(f"row count mismatch: expected {len(reps)}, found {len(records)}")
        elif got != reps:
            messages.append("repetition indices do not match the data file")
        rate = sum(r.converged for r in records) / len(records) if records else None
        reports.append(ConditionReport(cid, not messages, len(reps), len(records), rate, messages))
    return ValidationReport(dgm_id, method_id, reports)
