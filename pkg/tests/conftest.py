import numpy as np
import pytest

from livebench import store
from livebench.dgm import Condition

PROFILE = (15, 25, 50, 100, 250)


@pytest.fixture
def bench_root(tmp_path):
    root = tmp_path / "bench"
    store.init_benchmark(root, "test")
    return root


def small_grid():
    """Four conditions: two nulls and their alternatives."""
    out = []
    for sp in (1.0, 0.3):
        null = Condition(f"null_sp{sp:g}", 10, 0.0, 0.1, sp, True, PROFILE)
        alt = Condition(f"alt_sp{sp:g}", 10, 0.4, 0.1, sp, True, PROFILE, null.condition_id)
        out += [null, alt]
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def nine_grid(k=10):
    """Three selection levels by three effect sizes, each alternative paired with its null."""
    out = []
    for sp in (1.0, 0.3, 0.05):
        null_id = f"mu0_sp{sp:g}"
        for mu in (0.0, 0.2, 0.5):
            cid = f"mu{mu:g}_sp{sp:g}"
            out.append(Condition(cid, k, mu, 0.1, sp, True, PROFILE,
                                 None if mu == 0 else null_id))
    return out


def populate(root, conditions, reps, methods, seed=11, dgm_id="d"):
    """Register a DGM, simulate it and run ``methods`` over it."""
    from livebench.dgm import generate_dgm
    from livebench.estimators import MethodSpec, environment_string, run_method

    store.register_component(root, "dgm", store.ComponentEntry(dgm_id, "1.0.0", added_at="2000-01-01"))
    generate_dgm(root, dgm_id, conditions, reps, seed)
    for m in methods:
        if not store.load_manifest(root).has("method", m):
            entry = store.ComponentEntry(m, "1.0.0", added_at="2000-01-01")
            store.register_component(root, "method", entry)
            store.write_method_meta(root, entry, environment_string())
        run_method(root, dgm_id, MethodSpec(m))
    return root


FIVE_METHODS = ("fe", "re_kh", "pet", "trim_fill", "sm_3p")


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
