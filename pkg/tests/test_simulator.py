import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import trapezoid
from scipy.stats import chisquare

from kacwalk.kinetics import initial_state, solve_mbe
from kacwalk.model import Configuration, KernelSpec, alpha
from kacwalk.oracle import enumerate_states, generator_matrix, transient_distribution
from kacwalk.sampler import BaseMeasure
from kacwalk.simulator import (
    EventLog,
    LogCorruptionError,
    LogLikelihood,
    RateTracker,
    simulate_base,
    simulate_tilted,
)


def test_two_particle_event_rate_matches_oracle():
    # every labelled state leaves at rate 1/3 (2 of 3 outcomes move it), so
    # events plus label swaps form a Poisson(1/3) count on [0, 1]
    rng = np.random.default_rng(0)
    counts = []
    for _ in range(10000):
        log = simulate_base(Configuration([1, 1]), 1.0, rng)
        counts.append(len(log) + len(log.swaps))
    counts = np.array(counts)
    g = generator_matrix(enumerate_states(2, 2))
    rate = -float(g.rates[(1, 1)])
    se = math.sqrt(rate / counts.size)
    assert abs(counts.mean() - rate) < 3 * se


def _effective_rates(space, gen):
    # rate of jumps that change the unordered state (label swaps excluded)
    out = np.zeros(len(space))
    for (x, y), r in gen.rates.items():
        if x != y and sorted(space.states[x]) != sorted(space.states[y]):
            out[x] += float(r)
    return out


@pytest.mark.parametrize("cfg", [(1, 1), (0, 3, 1)])
def test_effective_event_count_matches_oracle(cfg):
    space = enumerate_states(len(cfg), sum(cfg))
    gen = generator_matrix(space)
    eff = _effective_rates(space, gen)
    init = np.zeros(len(space))
    init[space.index(list(cfg))] = 1.0
    ts = np.linspace(0.0, 1.0, 201)
    vals = [transient_distribution(gen, t, init) @ eff for t in ts]
    expected = float(trapezoid(vals, ts))
    rng = np.random.default_rng(5)
    counts = np.array([len(simulate_base(Configuration(list(cfg)), 1.0, rng)) for _ in range(10000)])
    se = counts.std(ddof=1) / math.sqrt(counts.size)
    assert abs(counts.mean() - expected) < 3 * se


def test_swaps_replay_and_roundtrip(tmp_path):
    rng = np.random.default_rng(11)
    log = simulate_base(Configuration([0, 2, 1, 3]), 5.0, rng)
    assert len(log.swaps) > 0
    path = tmp_path / "log.jsonl"
    log.to_jsonl(path)
    back = EventLog.from_jsonl(path)
    assert np.array_equal(back.swaps, log.swaps)
    assert back.final_configuration() == log.final_configuration()


def test_transition_probabilities_two_particles():
    # from (1,1) the first jump goes to (0,2) or (2,0) with prob 1/2 each
    rng = np.random.default_rng(1)
    firsts = []
    while len(firsts) < 4000:
        log = simulate_base(Configuration([1, 1]), 5.0, rng)
        if len(log):
            firsts.append(int(log.e_out[0, 0] == 0 and log.i[0] == 0))
    c = np.bincount(firsts, minlength=2)
    assert chisquare(c).pvalue > 1e-3


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=2, max_size=12), st.integers(0, 2**32 - 1))
def test_base_conserves_and_is_deterministic(values, seed):
    cfg = Configuration(values)
    a = simulate_base(cfg, 2.0, np.random.default_rng(seed))
    b = simulate_base(cfg, 2.0, np.random.default_rng(seed))
    a.validate()
    assert a.final_configuration().total == cfg.total
    assert np.array_equal(a.times, b.times) and np.array_equal(a.e_out, b.e_out)
    assert (a.e_in != a.e_out).any(axis=1).all()  # effective events only


def test_tilted_cutoff_and_zero_monotone():
    rng = np.random.default_rng(3)
    for _ in range(20):
        log = simulate_tilted(Configuration([1] * 50), 1.0, 0.5, 0.1, rng)
        log.validate()
        assert (log.times < 0.4).all()
        zeros = []
        for _, e in log.replay():
            zeros.append(e.count(0))
        assert all(x <= y for x, y in zip(zeros, zeros[1:]))
        assert (log.e_in[:, 0] == log.e_in[:, 1]).all()
        assert (log.e_out[:, 0] == 0).all()


def test_tilted_first_event_fair_coin():
    rng = np.random.default_rng(4)
    wins = []
    while len(wins) < 4000:
        log = simulate_tilted(Configuration([1, 1]), 1.0, 0.5, 0.1, rng, track_log_rn=False)
        if len(log):
            wins.append(int(log.i[0] == 1))  # particle i receives 0
    assert chisquare(np.bincount(wins, minlength=2)).pvalue > 1e-3


def test_tilted_zero_fraction_matches_kinetics():
    t_star, delta = 0.5, 0.1
    f = solve_mbe(initial_state(BaseMeasure.parse("point:1")), [alpha(t_star - delta, t_star)])
    predicted = f.masses[-1, 0]
    rng = np.random.default_rng(5)
    fr = [np.mean(simulate_tilted(Configuration([1] * 100), 1.0, t_star, delta, rng).final_configuration().energies == 0)
          for _ in range(200)]
    assert abs(np.mean(fr) - predicted) < 0.05


def test_jsonl_roundtrip(tmp_path):
    log = simulate_base(Configuration([0, 3, 1, 2]), 3.0, np.random.default_rng(6), seed=6)
    log.to_jsonl(tmp_path / "a.jsonl")
    back = EventLog.from_jsonl(tmp_path / "a.jsonl")
    assert np.array_equal(back.times, log.times)
    assert np.array_equal(back.e_out, log.e_out)
    assert back.seed == 6 and back.kernel == "base"
    back.to_jsonl(tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_corrupt_log_detected():
    log = simulate_base(Configuration([0, 3, 1, 2]), 5.0, np.random.default_rng(7))
    assert len(log) > 2
    log.e_in[1] = log.e_in[1] + [1, -1] if log.e_in[1, 1] > 0 else log.e_in[1] + [0, 1]
    with pytest.raises(LogCorruptionError):
        log.validate()


def test_rate_tracker_incremental_matches_recompute():
    rng = np.random.default_rng(8)
    e = rng.integers(0, 5, 30).tolist()
    tr = RateTracker(e, KernelSpec("base"))
    for _ in range(200):
        i, j = rng.choice(30, 2, replace=False)
        s = e[i] + e[j]
        ell = int(rng.integers(0, s + 1))
        tr.move(e[i], e[j], ell, s - ell)
        e[i], e[j] = ell, s - ell
    fresh = RateTracker(e, KernelSpec("base"))
    assert tr.pairs == pytest.approx(fresh.pairs, rel=1e-12)
    assert tr.diag == pytest.approx(fresh.diag, rel=1e-12)
    brute = sum(KernelSpec("base").pair_loss(e[a], e[b]) for a in range(30) for b in range(a + 1, 30))
    assert fresh.pairs == pytest.approx(brute, rel=1e-12)


def test_identical_kernels_give_zero_likelihood():
    log = simulate_base(Configuration([2, 0, 1, 3]), 2.0, np.random.default_rng(9))
    ll = LogLikelihood(log.initial.tolist(), log.n, KernelSpec("base"), KernelSpec("base"))
    for t, a, b in zip(log.times, log.e_in.tolist(), log.e_out.tolist()):
        ll.event(t, *a, *b)
    ll.advance(2.0)
    assert ll.value == 0.0
