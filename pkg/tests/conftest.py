import numpy as np
import pytest

from crowd_scaling.universe import SecurityRecord, build_snapshot

ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {key}: {detail}")


def random_universe(rng, n_funds, n_secs, density=0.3, min_cap=1e6):
    secs = [
        SecurityRecord(f"S{k:03d}", float(min_cap * (1 + rng.pareto(1.0))), 20.0, True, True)
        for k in range(n_secs)
    ]
    rows = []
    for i in range(n_funds):
        held = rng.random(n_secs) < density
        if not held.any():
            held[rng.integers(n_secs)] = True
        for k in np.flatnonzero(held):
            rows.append((f"F{i:03d}", f"S{k:03d}", float(rng.uniform(1e3, 1e6))))
    return secs, rows


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_snapshot():
    secs = [
        SecurityRecord("A", 8e9, 50.0, True, True),
        SecurityRecord("B", 4e9, 30.0, True, True),
        SecurityRecord("C", 2e9, 10.0, True, True),
        SecurityRecord("D", 1e9, 3.0, True, True),
    ]
    rows = [
        ("F1", "A", 100.0),
        ("F1", "B", 300.0),
        ("F2", "A", 200.0),
        ("F2", "C", 50.0),
        ("F2", "D", 50.0),
        ("F3", "B", 10.0),
    ]
    return build_snapshot(secs, rows)
