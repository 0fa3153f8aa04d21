import re
from html.parser import HTMLParser

import pytest

from livebench import store
from livebench.aggregate import MissingnessStrategy, build_leaderboard, leaderboard_path, MODES
from livebench.measures import MEASURE_IDS, measure_path, read_measure_csv
from livebench.report import fmt3, fmt_cell, write_report

from conftest import nine_grid, populate


class Tables(HTMLParser):
    """Collects every table as {id: [(row_class, [cell text, ...]), ...]}."""

    def __init__(self):
        super().__init__()
        self.tables, self.links = {}, []
        self._table = self._row = self._cell = None
        self._cls = ""

    def handle_starttag(self, tag, attrs):
        a = dict(attrs)
        if tag == "table":
            self._table = self.tables.setdefault(a.get("id", f"t{len(self.tables)}"), [])
        elif tag == "tr":
            self._row, self._cls = [], a.get("class", "")
        elif tag in ("td", "th"):
            self._cell = ""
        elif tag == "a":
            self.links.append(a.get("href"))
        elif tag in ("script", "img", "iframe"):
            raise AssertionError(f"unexpected <{tag}> in report")
        if tag == "link":
            assert "://" not in a.get("href", "")

    def handle_endtag(self, tag):
        if tag in ("td", "th"):
            self._row.append(self._cell)
            self._cell = None
        elif tag == "tr":
            self._table.append((self._cls, self._row))
        elif tag == "table":
            self._table = None

    def handle_data(self, data):
        if self._cell is not None:
            self._cell += data


def parse(path):
    p = Tables()
    p.feed(path.read_text("utf-8"))
    return p


@pytest.fixture(scope="module")
def site(tmp_path_factory):
    root = tmp_path_factory.mktemp("rep") / "bench"
    store.init_benchmark(root, "t")
    populate(root, nine_grid(8), 12, ("fe", "pet", "sm_3p", "mean"))
    for mid in MEASURE_IDS:
        for mode in MODES:
            build_leaderboard(root, mid, mode=mode)
    store.retire_component(root, "method", "mean")
    out = root / "report"
    files = write_report(root, out)
    return root, out, files


def test_formatting():
    assert fmt3(0.123456) == "0.123"
    assert fmt3(123456.0) == "1.23e+05"
    assert fmt3(None) == "n/a"
    assert fmt_cell(0.0312, 0.00456) == "0.0312 (±0.00456)"
    assert fmt_cell(1.0, None) == "1"
    assert fmt_cell(None, 0.1) == "n/a"


def test_bundle_structure(site):
    root, out, files = site
    names = sorted(p.name for p in files)
    assert names == sorted(["style.css", "index.html", "convergence.html", "methods.html"]
                           + [f"measure-{m}.html" for m in MEASURE_IDS])
    index = parse(out / "index.html")
    assert [h for h in index.links if h.startswith("measure-")] == [
        f"measure-{m}.html" for m in MEASURE_IDS]
    for mid in MEASURE_IDS:
        page = parse(out / f"measure-{mid}.html")
        assert {"leaderboard-by_condition", "leaderboard-by_set"} <= set(page.tables)


def test_leaderboard_tables_match_csv(site):
    root, out, _ = site
    mw = MissingnessStrategy()
    for mid in MEASURE_IDS:
        page = parse(out / f"measure-{mid}.html")
        for mode in MODES:
            csv_rows = store.read_csv_rows(leaderboard_path(root, mid, mw, mode, ["d"]),
                                           ["method_id", "mean_rank", "min", "max", "mean",
                                            "median", "n_cells"])
            html_rows = [cells for _, cells in page.tables[f"leaderboard-{mode}"][1:]]
            assert len(html_rows) == len(csv_rows)
            for h, c in zip(html_rows, csv_rows):
                assert h[0] == c[0] and h[6] == c[6]
                for hv, cv in zip(h[1:6], c[1:6]):
                    assert hv == fmt3(None if cv == "" else float(cv))


def test_value_cells_match_measure_csv(site):
    root, out, _ = site
    pattern = re.compile(r"^(\S+) \(±(\S+)\)$")
    for mid in MEASURE_IDS:
        values = {(v.method_id, v.condition_id): v
                  for v in read_measure_csv(measure_path(root, "d", mid), mid)}
        table = parse(out / f"measure-{mid}.html").tables["values-d"]
        header = table[0][1]
        assert header[0] == "condition"
        for _, row in table[1:]:
            for method, cell in zip(header[1:], row[1:]):
                v = values[(method, row[0])]
                assert cell == fmt_cell(v.value, v.mcse)
                m = pattern.match(cell)
                if v.value is not None and v.mcse is not None:
                    assert m, cell


def test_deprecated_method(site):
    root, out, _ = site
    methods = parse(out / "methods.html").tables["methods"]
    rows = {cells[0]: (cls, cells) for cls, cells in methods[1:]}
    assert rows["mean"][0] == "deprecated" and rows["mean"][1][2] == "deprecated"
    assert rows["fe"][0] == ""
    assert "numpy" in rows["fe"][1][4]
    # leaderboards were built before retirement; a fresh default build hides the method
    rows = build_leaderboard(root, "rmse", write=False)
    assert "mean" not in [r.method_id for r in rows]


def test_convergence_page(site):
    root, out, _ = site
    table = parse(out / "convergence.html").tables["values-d"]
    assert len(table) == 1 + 9
    assert table[0][1][1:] == ["fe", "pet", "sm_3p"]


def test_report_reads_only_files(site, monkeypatch):
    root, out, _ = site
    import livebench.measures as M
    import livebench.aggregate as A

    def boom(*a, **k):
        raise AssertionError("report must not recompute")

    monkeypatch.setattr(M, "compute_measures", boom)
    monkeypatch.setattr(A, "compute_measures", boom)
    before = {p.name: p.read_bytes() for p in out.iterdir()}
    write_report(root, out)
    assert {p.name: p.read_bytes() for p in out.iterdir()} == before
