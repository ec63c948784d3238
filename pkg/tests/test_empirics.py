from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kacwalk.empirics import (
    TestFunction,
    balance_residual,
    empirical_flow,
    empirical_measure,
    measure_path,
)
from kacwalk.model import Configuration
from kacwalk.simulator import EventLog, LogCorruptionError, simulate_base, simulate_tilted


def test_empirical_measure_examples():
    assert empirical_measure(Configuration([1, 1, 1])) == {1: Fraction(1)}
    mu = empirical_measure(Configuration([0, 2, 1, 1]))
    assert mu == {0: Fraction(1, 4), 1: Fraction(1, 2), 2: Fraction(1, 4)}
    assert sum(k * v for k, v in mu.items()) * 4 == 4


def _single_event_log():
    return EventLog.from_lists(2, 2, 1.0, [1, 1], [0.3], [1], [0], [(1, 1)], [(0, 2)])


def test_measure_path_replay_semantics():
    path = measure_path(_single_event_log(), [0.0, 0.29, 0.3, 1.0])
    assert path.at(1) == {1: Fraction(1)}
    assert path.at(2) == {0: Fraction(1, 2), 2: Fraction(1, 2)}
    empty = EventLog.from_lists(3, 3, 1.0, [1, 2, 0], [], [], [], [], [])
    p = measure_path(empty, np.linspace(0, 1, 5))
    assert all(p.at(k) == empirical_measure(Configuration([1, 2, 0])) for k in range(5))


def test_measure_path_detects_corruption():
    log = EventLog.from_lists(2, 2, 1.0, [1, 1], [0.3], [1], [0], [(0, 2)], [(1, 1)])
    with pytest.raises(LogCorruptionError):
        measure_path(log, [1.0])


def test_flow_examples():
    empty = EventLog.from_lists(3, 3, 1.0, [1, 2, 0], [], [], [], [], [])
    assert empirical_flow(empty).total_mass == 0
    flow = empirical_flow(_single_event_log())
    assert flow.total_mass == Fraction(1, 2)
    atoms = flow.atoms()
    assert len(atoms) == 1 and list(atoms.values()) == [[0.3]]


def test_flow_mass_counts_events_and_support():
    log = simulate_base(Configuration([0, 3, 1, 2, 5]), 4.0, np.random.default_rng(0))
    flow = empirical_flow(log)
    assert flow.total_mass * log.n == len(log)
    for q in flow.atoms():
        assert q.conserving and not q.identity
    binned = flow.binned(np.linspace(0, 4, 9))
    assert sum(binned.values()) == flow.total_mass


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.lists(st.integers(-5, 5), min_size=11, max_size=11), st.booleans())
def test_balance_exact_for_static_phi(seed, table, tilted):
    rng = np.random.default_rng(seed)
    cfg = Configuration(rng.integers(0, 4, 12)) if not tilted else Configuration([1] * 12)
    if tilted:
        log = simulate_tilted(cfg, 1.0, 0.5, 0.1, rng, track_log_rn=False)
    else:
        log = simulate_base(cfg, 1.5, rng)
    path = measure_path(log, np.linspace(0, log.horizon, 7))
    phi = TestFunction.static([Fraction(x, 3) for x in table])
    assert balance_residual(path, empirical_flow(log), phi, exact=True) == 0


def test_balance_for_energy_and_constant():
    log = simulate_base(Configuration([2, 0, 1, 5, 3]), 2.0, np.random.default_rng(1))
    path = measure_path(log, np.linspace(0, 2, 11))
    flow = empirical_flow(log)
    assert balance_residual(path, flow, TestFunction.static(list(range(30))), exact=True) == 0
    assert balance_residual(path, flow, TestFunction.static([1] * 30), exact=True) == 0


def test_balance_linear_in_time_is_exact():
    log = simulate_base(Configuration(np.random.default_rng(2).integers(0, 4, 100)), 1.0, np.random.default_rng(3))
    grid = np.linspace(0, 1, 1001)
    phi = TestFunction.from_callable(lambda t, e: t * min(e, 10), lambda t, e: min(e, 10), grid, 12)
    path = measure_path(log, grid)
    assert abs(balance_residual(path, empirical_flow(log), phi)) < 1e-3


def test_balance_converges_second_order():
    log = simulate_base(Configuration(np.random.default_rng(4).integers(0, 4, 100)), 1.0, np.random.default_rng(5))
    flow = empirical_flow(log)
    res = []
    for cells in (25, 50, 100, 200):
        grid = np.linspace(0, 1, cells + 1)
        phi = TestFunction.from_callable(lambda t, e: np.cos(3 * t) * min(e, 10),
                                         lambda t, e: -3 * np.sin(3 * t) * min(e, 10), grid, 12)
        res.append(abs(balance_residual(measure_path(log, grid), flow, phi)))
    ratios = [a / b for a, b in zip(res, res[1:])]
    assert all(3.0 < r < 5.0 for r in ratios)


def test_csv_outputs(tmp_path):
    log = simulate_base(Configuration([1, 2, 0, 1]), 1.0, np.random.default_rng(6))
    measure_path(log, [0.0, 0.5, 1.0]).to_csv(tmp_path / "m.csv")
    empirical_flow(log).to_csv(tmp_path / "f.csv", [0.0, 0.5, 1.0])
    assert (tmp_path / "m.csv").read_text().startswith("t,epsilon,mass\n")
    assert (tmp_path / "f.csv").read_text().startswith("t_bin_lo,t_bin_hi,e1,e2,e1p,e2p,mass\n")
