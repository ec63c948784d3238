import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kacwalk.kinetics import (
    Flux,
    KineticPath,
    build_bar_path,
    build_bar_path_delta,
    initial_state,
    reference_flux,
    solve_be,
)
from kacwalk.ldp import (
    InfiniteCost,
    RateBreakdown,
    bar_cost_direct,
    dynamical_cost,
    reference_flow_density,
    static_cost,
    total_cost,
    xlogx_cost,
)
from kacwalk.sampler import BaseMeasure

POINT = BaseMeasure("point", e0=1)
GEOM = BaseMeasure("geom", p=0.5)

# frozen values for point:1, t*=0.5, T=1 (two discretizations agree to ~1e-4)
FROZEN_DELTA = {0.1: 0.58346, 0.05: 1.09493, 0.01: 2.70085}
FROZEN_BAR = 5.1335


def test_reference_density_examples():
    assert reference_flow_density({0: 1.0}) == {}
    d = reference_flow_density({1: 1.0})
    assert set(d) == {(1, 1, 2, 0), (1, 1, 0, 2)}
    assert all(v == pytest.approx(1 / 6) for v in d.values())


@given(st.dictionaries(st.integers(0, 5), st.floats(0.01, 1), min_size=1, max_size=4))
@settings(max_examples=30, deadline=None)
def test_reference_density_symmetric(pi):
    d = reference_flow_density(pi)
    for (a, b, c, e), v in d.items():
        assert d[(b, a, c, e)] == pytest.approx(v)
        assert d[(a, b, e, c)] == pytest.approx(v)
        assert a + b == c + e


def test_xlogx_cost_stable():
    r = np.array([0.0, 1.0, 1 + 1e-6, 1 - 5e-5, 2.0])
    out = xlogx_cost(r)
    assert out[0] == 1.0 and out[1] == 0.0
    assert out[2] == pytest.approx(0.5e-12, rel=1e-6)
    assert out[3] == pytest.approx(0.5 * 2.5e-9, rel=1e-4)
    assert out[4] == pytest.approx(2 * math.log(2) - 1)
    xs = np.linspace(0, 3, 3001)
    assert (np.diff(xlogx_cost(xs), 2) >= -1e-12).all()


def test_static_cost_examples():
    me = GEOM.pmf(np.arange(80))
    assert static_cost(me / me.sum(), GEOM, 1.0) == pytest.approx(0, abs=1e-12)
    assert static_cost({0: 1.0}, GEOM, 1.0) == pytest.approx(2 * math.log(2))
    inf = static_cost({0: 1.0}, POINT, 1.0)
    assert isinstance(inf, InfiniteCost) and math.isinf(inf)
    assert static_cost({1: 1.0}, POINT, 1.0) == 0.0
    with pytest.raises(ValueError):
        static_cost({3: 1.0}, GEOM, 1.0)


def test_static_cost_infinite_gamma_star():
    fin = BaseMeasure("finite", weights=(0.5, 0.5))
    assert math.isinf(fin.gamma_star)
    assert math.isinf(static_cost({0: 0.8, 1: 0.2}, fin, 0.5))
    assert static_cost({0: 0.5, 1: 0.5}, fin, 0.5) == pytest.approx(0, abs=1e-12)


@given(st.lists(st.floats(0.01, 1), min_size=2, max_size=3))
@settings(max_examples=40, deadline=None)
def test_static_cost_gap_term_has_slope_log2(w):
    # geom(1/2) at e = 1: m_e = m, gamma_e = 0, gamma* = log 2
    pi = np.array(w) / sum(w)
    mean = float(pi @ np.arange(pi.size))
    if mean > 1:
        return
    ent = float(np.sum(pi * np.log(pi / GEOM.pmf(np.arange(pi.size)))))
    assert static_cost(pi, GEOM, 1.0) - ent == pytest.approx(math.log(2) * (1 - mean), abs=1e-9)


def _lln_path(T=1.0):
    f0 = initial_state(GEOM, e_cut=40)
    path = solve_be(f0, T, dt=1e-2, grid=np.linspace(0, T, 11))
    path.flux = reference_flux(path)
    return path


def test_dynamical_cost_zero_on_reference():
    assert abs(dynamical_cost(_lln_path())) < 1e-10


def test_dynamical_cost_zero_flux_equals_reference_mass():
    path = _lln_path()
    path.flux = None
    J, parts = dynamical_cost(path, with_parts=True)
    assert J == pytest.approx(np.trapezoid(parts["reference_total"], path.grid))
    # delta_1 for unit time: reference mass 1/3
    one = KineticPath(np.array([0.0, 1.0]), np.array([1]), np.ones((2, 1)), np.zeros(2), np.zeros(2))
    assert dynamical_cost(one) == pytest.approx(1 / 3)


@given(st.floats(-0.9, 2.0).filter(lambda x: abs(x) > 1e-3))
@settings(max_examples=20, deadline=None)
def test_dynamical_cost_increases_under_perturbation(eps):
    path = _lln_path()
    path.flux = Flux(path.flux.quads, path.flux.density * (1 + eps))
    assert dynamical_cost(path) > 0


def test_dynamical_cost_infinite_witness():
    one = KineticPath(np.array([0.0, 1.0]), np.array([1, 3]), np.array([[1.0, 0.0]] * 2), np.zeros(2), np.zeros(2))
    one.flux = Flux(np.array([[1, 3, 2, 2]]), np.array([[0.1], [0.1]]))
    J = dynamical_cost(one)
    assert isinstance(J, InfiniteCost) and "(1, 3, 2, 2)" in J.witness


@pytest.mark.parametrize("delta", sorted(FROZEN_DELTA))
def test_frozen_delta_cost_two_ways(delta):
    path = build_bar_path_delta(POINT, 0.5, delta, 1.0)
    J = dynamical_cost(path)
    direct = bar_cost_direct(POINT, 0.5, 1.0, delta=delta)["total"]
    assert J == pytest.approx(FROZEN_DELTA[delta], abs=2e-4)
    assert direct == pytest.approx(J, rel=1e-3)


def test_bar_cost_two_ways_and_bounds():
    direct = bar_cost_direct(POINT, 0.5, 1.0)
    J = dynamical_cost(build_bar_path(POINT, 0.5, 1.0))
    assert J == pytest.approx(FROZEN_BAR, rel=1e-3)
    assert abs(direct["total"] - J) / J < 0.01
    assert direct["second_term"] <= 0.5
    assert direct["tail_bound"] < 0.01 * J


def test_bar_cost_tail_bound_shrinks():
    bounds = [bar_cost_direct(POINT, 0.5, 1.0, alpha_max=0.5 * 4.0 ** k)["tail_bound"] for k in (6, 9, 12)]
    assert bounds[0] > bounds[1] > bounds[2]


def test_bar_cost_refinement_stable():
    coarse = bar_cost_direct(POINT, 0.5, 1.0, per_octave=16)["total"]
    fine = bar_cost_direct(POINT, 0.5, 1.0, per_octave=64)["total"]
    assert abs(coarse - fine) / fine < 0.01


def test_delta_distance_to_limit_shrinks():
    costs = [bar_cost_direct(POINT, 0.5, 1.0, delta=k * 0.5)["total"] for k in (0.2, 0.1, 0.05, 0.02)]
    gaps = [FROZEN_BAR - c for c in costs]
    assert all(g > 0 for g in gaps)
    assert all(x > y for x, y in zip(gaps, gaps[1:]))


def test_total_cost_examples():
    bar = build_bar_path_delta(POINT, 0.5, 0.1, 1.0)
    rb = total_cost({1: 1.0}, bar, POINT, 1.0)
    assert rb.h_static == 0 and rb.total == rb.j_dynamic
    lln = _lln_path()
    rb = total_cost(dict(enumerate(lln.masses[0] / lln.masses[0].sum())), lln, GEOM, 1.0)
    assert abs(rb.total) < 1e-6


def test_rate_breakdown_json():
    rb = RateBreakdown(InfiniteCost("why"), 1.5, {"n": np.int64(3)})
    d = json.loads(rb.to_json())
    assert d["H"] == "inf" and d["I"] == "inf" and d["J"] == 1.5
    assert d["diagnostics"]["H_witness"] == "why" and d["diagnostics"]["n"] == 3
    assert RateBreakdown(0.25, 1.5).total == 1.75
