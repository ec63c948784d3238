import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from kacwalk.sampler import (
    BaseMeasure,
    SamplingError,
    gamma_for_mean,
    microcanonical_marginal,
    partition_function,
    sample_microcanonical,
    tilt,
)


def test_parse_and_gamma_star():
    g = BaseMeasure.parse("geom:0.5")
    assert g.gamma_star == pytest.approx(math.log(2))
    assert BaseMeasure.parse("point:3").gamma_star == math.inf
    f = BaseMeasure.parse("finite:1,2,1")
    assert f.weights == (0.25, 0.5, 0.25)
    assert str(BaseMeasure.parse(str(f))) == str(f)
    with pytest.raises(ValueError):
        BaseMeasure.parse("finite:1,0,1")  # support {0, 2}
    with pytest.raises(ValueError):
        BaseMeasure.parse("point:0")
    with pytest.raises(ValueError):
        BaseMeasure.parse("geom:1.5")


def test_partition_function_examples():
    g = BaseMeasure.parse("geom:0.5")
    assert partition_function(g, 0.0) == pytest.approx(1.0)
    assert partition_function(BaseMeasure.parse("point:1"), 0.3) == pytest.approx(math.exp(0.3))
    assert partition_function(g, math.log(2 / 3)) == pytest.approx(0.75)
    with pytest.raises(ValueError):
        partition_function(g, math.log(2))


def test_gamma_for_mean_examples():
    g = BaseMeasure.parse("geom:0.5")
    assert gamma_for_mean(g, 1.0) == 0.0
    ge = gamma_for_mean(g, 0.5)
    assert ge == pytest.approx(math.log(2 / 3), abs=1e-12)
    assert tilt(g, ge).pmf(np.arange(3)) == pytest.approx([2 / 3, 2 / 9, 2 / 27])
    assert gamma_for_mean(BaseMeasure.parse("point:1"), 1.0) == 0.0
    with pytest.raises(ValueError):
        gamma_for_mean(BaseMeasure.parse("point:1"), 2.0)
    with pytest.raises(ValueError):
        gamma_for_mean(BaseMeasure.parse("finite:1,1,1"), 2.5)


@pytest.mark.parametrize("spec", ["geom:0.3", "geom:0.8", "finite:0.2,0.5,0.1,0.2"])
def test_tilted_mean_increasing(spec):
    m = BaseMeasure.parse(spec)
    top = min(m.gamma_star - 1e-3, 3.0)
    gs = np.linspace(-3, top, 60)
    means = [tilt(m, g).mean() for g in gs]
    assert np.all(np.diff(means) > 0)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.05, 5.0))
def test_gamma_for_mean_hits_target(p, e):
    m = BaseMeasure("geom", p=p)
    g = gamma_for_mean(m, e)
    assert abs(tilt(m, g).mean() - e) < 1e-10 * max(1, e)
    assert g < m.gamma_star


def test_pmf_normalized():
    for spec in ["geom:0.3", "finite:0.2,0.5,0.3"]:
        m = BaseMeasure.parse(spec)
        assert m.pmf(np.arange(400)).sum() == pytest.approx(1.0, abs=1e-12)


def test_point_mass_sample_deterministic():
    cfg = sample_microcanonical(BaseMeasure.parse("point:1"), 5, 1.0, np.random.default_rng(0))
    assert cfg.energies.tolist() == [1] * 5


def test_geometric_two_particles_uniform():
    m = BaseMeasure.parse("geom:0.5")
    rng = np.random.default_rng(1)
    counts = {0: 0, 1: 0, 2: 0}
    for _ in range(30000):
        cfg = sample_microcanonical(m, 2, 1.0, rng)
        assert cfg.total == 2
        counts[int(cfg.energies[0])] += 1
    assert chisquare(list(counts.values())).pvalue > 1e-3


def _brute_marginal(m, n, total):
    pm = m.pmf(np.arange(total + 1))
    out = np.zeros(total + 1)
    for x in itertools.product(range(total + 1), repeat=n):
        if sum(x) == total:
            out[x[0]] += np.prod(pm[list(x)])
    return out / out.sum()


@pytest.mark.parametrize("spec,n,total", [("geom:0.4", 3, 5), ("finite:0.5,0.2,0.3", 4, 3)])
def test_marginal_dp_matches_enumeration(spec, n, total):
    m = BaseMeasure.parse(spec)
    assert microcanonical_marginal(m, n, total) == pytest.approx(_brute_marginal(m, n, total), abs=1e-14)


def test_sampler_marginal_matches_dp():
    m = BaseMeasure.parse("geom:0.3")
    n, e = 6, 2.0
    total = 12
    exact = microcanonical_marginal(m, n, total)
    rng = np.random.default_rng(2)
    draws = np.array([sample_microcanonical(m, n, e, rng).energies for _ in range(20000)])
    emp = np.bincount(draws.ravel(), minlength=total + 1) / draws.size
    assert 0.5 * np.abs(emp - exact).sum() < 0.01
    assert (draws.sum(axis=1) == total).all()


def test_attempt_cap_raises():
    m = BaseMeasure.parse("geom:0.5")
    with pytest.raises(SamplingError):
        sample_microcanonical(m, 400, 1.0, np.random.default_rng(0), max_attempts=1, batch=1)
