from fractions import Fraction
from math import comb

import numpy as np
import pytest

from kacwalk.oracle import enumerate_states, generator_matrix, transient_distribution


def test_enumerate_examples():
    assert enumerate_states(2, 2).states == ((0, 2), (1, 1), (2, 0))
    assert len(enumerate_states(3, 4)) == comb(6, 2) == 15
    assert enumerate_states(2, 0).states == ((0, 0),)
    with pytest.raises(MemoryError):
        enumerate_states(10, 30, cap=1000)


@pytest.mark.parametrize("n,total", [(2, 2), (3, 4), (4, 4), (3, 6)])
def test_state_space_invariants(n, total):
    sp = enumerate_states(n, total)
    assert len(sp) == comb(total + n - 1, n - 1)
    assert len(set(sp.states)) == len(sp)
    assert all(sum(s) == total for s in sp.states)
    assert list(sp.states) == sorted(sp.states)


def test_generator_two_particles():
    sp = enumerate_states(2, 2)
    g = generator_matrix(sp)
    r = g.rates
    i = sp.index
    assert r[(i((1, 1)), i((0, 2)))] == Fraction(1, 6)
    assert r[(i((1, 1)), i((2, 0)))] == Fraction(1, 6)
    assert r[(i((0, 2)), i((1, 1)))] == Fraction(1, 6)


@pytest.mark.parametrize("n,total", [(2, 2), (3, 4), (4, 4)])
def test_generator_exact_structure(n, total):
    g = generator_matrix(enumerate_states(n, total))
    assert all(x == 0 for x in g.row_sums())
    for (x, y), r in g.rates.items():
        assert g.rates.get((y, x), Fraction(0)) == r  # symmetric
    cols = {}
    for (x, y), r in g.rates.items():
        cols[y] = cols.get(y, Fraction(0)) + r
    assert all(c == 0 for c in cols.values())  # uniform law is stationary


def test_transient_examples():
    g = generator_matrix(enumerate_states(2, 2))
    init = np.array([0.0, 1.0, 0.0])
    assert np.array_equal(transient_distribution(g, 0.0, init), init)
    far = transient_distribution(g, 200.0, init)
    assert np.abs(far - 1 / 3).max() < 1e-10


def test_transient_matches_expm():
    from scipy.linalg import expm

    g = generator_matrix(enumerate_states(3, 4))
    init = np.zeros(15)
    init[3] = 1
    exact = init @ expm(1.3 * g.dense())
    got = transient_distribution(g, 1.3, init)
    assert np.abs(got - exact).max() < 1e-12
    assert got.sum() == pytest.approx(1.0, abs=1e-14)


def test_generator_csv(tmp_path):
    g = generator_matrix(enumerate_states(2, 2))
    g.to_csv(tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "from,to,rate_num,rate_den,rate"
    assert len(lines) == 1 + len(g.rates)
