"""Static HTML report bundle built from the benchmark's CSV files.

The generator only reads files already on disk (manifest, method metadata,
measure and leaderboard CSVs); it never recomputes a number.  Pages are plain
HTML sharing one stylesheet and need no scripts.
"""

from __future__ import annotations

import html
import json
from pathlib import Path
from typing import Optional, Sequence

from . import store
from .aggregate import MODES, MissingnessStrategy, leaderboard_path, read_leaderboard
from .dgm import load_conditions
from .measures import MEASURE_IDS, MEASURE_SPECS, measure_path, read_measure_csv

CSS = """\
body { font-family: sans-serif; margin: 2em; color: #222; }
table { border-collapse: collapse; margin: 1em 0; }
th, td { border: 1px solid #bbb; padding: 0.25em 0.6em; text-align: right; }
th:first-child, td:first-child { text-align: left; }
th { background: #eee; }
tr.deprecated td { color: #999; font-style: italic; }
td.missing { color: #999; }
nav a { margin-right: 1em; }
.note { color: #555; font-size: 0.9em; }
"""


def fmt3(x: Optional[float]) -> str:
    """Three significant digits, or ``n/a``."""
    if x is None:
        return "n/a"
    return f"{x:.3g}"


def fmt_cell(value: Optional[float], mcse: Optional[float]) -> str:
    if value is None:
        return "n/a"
    if mcse is None:
        return fmt3(value)
    return f"{fmt3(value)} (±{fmt3(mcse)})"


def _esc(x) -> str:
    return html.escape(str(x))


def _page(title: str, body: str) -> str:
    nav = ('<nav><a href="index.html">Overview</a><a href="methods.html">Methods</a>'
           '<a href="convergence.html">Convergence</a></nav>')
    return (
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n"
        f"<title>{_esc(title)}</title>\n<link rel=\"stylesheet\" href=\"style.css\">\n"
        f"</head>\n<body>\n{nav}\n<h1>{_esc(title)}</h1>\n{body}\n</body>\n</html>\n"
    )


def _table(header: Sequence[str], rows: Sequence[Sequence[str]], row_classes=None,
           cell_styles=None, table_id: str = "") -> str:
    out = [f'<table id="{_esc(table_id)}">' if table_id else "<table>", "<thead><tr>"]
    out += [f"<th>{_esc(h)}</th>" for h in header]
    out.append("</tr></thead><tbody>")
    for i, row in enumerate(rows):
        cls = row_classes[i] if row_classes else ""
        out.append(f'<tr class="{cls}">' if cls else "<tr>")
        for j, cell in enumerate(row):
            style = cell_styles[i][j] if cell_styles else ""
            attrs = ""
            if cell == "n/a":
                attrs += ' class="missing"'
            if style:
                attrs += f' style="{style}"'
            out.append(f"<td{attrs}>{_esc(cell)}</td>")
        out.append("</tr>")
    out.append("</tbody></table>")
    return "".join(out)


def _heat(rank: float, m: int) -> str:
    """Background colour from green (rank 1) to red (rank m)."""
    if m <= 1:
        return "background: hsl(120, 60%, 85%)"
    hue = round(120 * (m - rank) / (m - 1))
    return f"background: hsl({hue}, 60%, 85%)"


def _leaderboard_section(root, measure_id, strategy, dgm_ids, deprecated) -> str:
    parts = []
    for mode in MODES:
        path = leaderboard_path(root, measure_id, strategy, mode, dgm_ids)
        parts.append(f"<h2>Leaderboard ({_esc(mode)}, {_esc(strategy.label)})</h2>")
        if not path.exists():
            parts.append('<p class="note">not computed</p>')
            continue
        rows = read_leaderboard(path)
        shown = [[r[0]] + [fmt3(None if v == "" else float(v)) for v in r[1:6]] + [r[6]]
                 for r in rows]
        classes = ["deprecated" if r[0] in deprecated else "" for r in rows]
        parts.append(_table(["method", "mean rank", "min", "max", "mean", "median", "cells"],
                            shown, classes, table_id=f"leaderboard-{mode}"))
    return "\n".join(parts)


def _heat_section(root, measure_id, strategy, dgm_ids, methods) -> str:
    from .aggregate import rank_methods

    spec = MEASURE_SPECS[measure_id]
    parts = []
    for dgm_id in dgm_ids:
        path = measure_path(root, dgm_id, measure_id)
        parts.append(f"<h2>Per-condition values: {_esc(dgm_id)}</h2>")
        if not path.exists():
            parts.append('<p class="note">not computed</p>')
            continue
        values = {(v.method_id, v.condition_id): v for v in read_measure_csv(path, measure_id)
                  if v.missingness_strategy == strategy.label}
        rows, styles = [], []
        for cond in load_conditions(root, dgm_id):
            cid = cond.condition_id
            cells = [values.get((m, cid)) for m in methods]
            if all(c is None or c.value is None for c in cells):
                continue
            ranks = rank_methods({m: (c.value if c else None) for m, c in zip(methods, cells)},
                                 spec.direction, spec.target_value)
            rows.append([cid] + [fmt_cell(c.value, c.mcse) if c else "n/a" for c in cells])
            styles.append([""] + [_heat(ranks[m], len(methods)) for m in methods])
        parts.append(_table(["condition"] + list(methods), rows, cell_styles=styles,
                            table_id=f"values-{dgm_id}"))
    return "\n".join(parts)


def write_report(root, out_dir, strategy: MissingnessStrategy | None = None,
                 include_deprecated: bool = False) -> list[Path]:
    """Render the report bundle into ``out_dir``; returns the written files."""
    strategy = strategy or MissingnessStrategy()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = store.load_manifest(root)
    dgm_ids = manifest.active_ids("dgm", include_deprecated)
    methods = sorted(manifest.active_ids("method", include_deprecated))
    deprecated = {e.id for e in manifest.methods if e.status == "deprecated"}
    written = []

    def emit(name, text):
        store.atomic_write_text(out / name, text)
        written.append(out / name)

    emit("style.css", CSS)

    # index
    body = [f"<p>Benchmark <b>{_esc(manifest.benchmark_name)}</b>, schema "
            f"{_esc(manifest.schema_version)}. Missingness strategy: {_esc(strategy.label)}.</p>"]
    for kind in store.KINDS:
        entries = manifest.entries(kind)
        body.append(f"<h2>{_esc(kind.upper() if kind == 'dgm' else kind.capitalize())}s</h2>")
        body.append(_table(
            ["id", "version", "status", "added"],
            [[e.id, e.version, e.status, e.added_at] for e in entries],
            ["deprecated" if e.status == "deprecated" else "" for e in entries],
            table_id=f"{kind}s",
        ))
    body.append("<h2>Performance measures</h2><ul>")
    for mid in MEASURE_IDS:
        body.append(f'<li><a href="measure-{mid}.html">{_esc(mid)}</a>: '
                    f"{_esc(MEASURE_SPECS[mid].description)}</li>")
    body.append("</ul>")
    emit("index.html", _page("Benchmark overview", "\n".join(body)))

    for mid in MEASURE_IDS:
        body = [f'<p class="note">{_esc(MEASURE_SPECS[mid].description)}; '
                f"direction: {_esc(MEASURE_SPECS[mid].direction)}. "
                "Cells show value (±Monte Carlo SE).</p>"]
        body.append(_leaderboard_section(root, mid, strategy, dgm_ids, deprecated))
        body.append(_heat_section(root, mid, strategy, dgm_ids, methods))
        emit(f"measure-{mid}.html", _page(f"Measure: {mid}", "\n".join(body)))

    body = ['<p class="note">Share of repetitions in which each method converged, '
            "before any missingness handling.</p>"]
    body.append(_heat_section(root, "convergence", strategy, dgm_ids, methods))
    emit("convergence.html", _page("Convergence", "\n".join(body)))

    rows, classes = [], []
    for e in manifest.methods:
        meta_path = Path(root) / "methods" / e.id / "meta.json"
        env = ""
        if meta_path.exists():
            env = json.loads(meta_path.read_text("utf-8")).get("environment", "")
        rows.append([e.id, e.version, e.status, e.provenance, env, e.added_at])
        classes.append("deprecated" if e.status == "deprecated" else "")
    emit("methods.html", _page("Methods", _table(
        ["id", "version", "status", "provenance", "environment", "added"], rows, classes,
        table_id="methods")))
    return written
