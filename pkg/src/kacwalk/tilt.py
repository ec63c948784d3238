"""Change of measure between the tilted and the base chain.

Path log-likelihoods, replica runs under the tilted law, the per-particle
relative entropy estimate and the importance-sampling estimate of the
probability of a neighborhood of the evaporating path.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson
from scipy.special import logsumexp

from .kinetics import _initial_for_bar, solve_mbe
from .model import Configuration, KernelSpec, alpha, alpha_dot
from .sampler import BaseMeasure, sample_microcanonical
from .simulator import EventLog, LogLikelihood, simulate_base, simulate_tilted

__all__ = [
    "FlowFunctional",
    "NeighborhoodSpec",
    "ReplicaStats",
    "path_log_rn",
    "replica_seed",
    "run_replicas",
    "entropy_estimate",
    "estimate_rare_probability",
    "martingale_diagnostic",
    "flow_integral",
    "bar_targets",
]


def path_log_rn(log: EventLog, t_star: float | None = None, delta: float | None = None,
                T: float | None = None, numerator: KernelSpec | None = None,
                denominator: KernelSpec | None = None, with_diag: bool = False):
    """Log-density of the path law of ``numerator`` against ``denominator``.

    Defaults to the tilted kernel with ``(t_star, delta)`` against the base
    kernel.  Recomputed by replaying ``log``; returns ``-inf`` when some
    event has zero rate under the numerator (for the tilted law: any event
    after ``t_star - delta`` or any non-merging event).
    """
    if numerator is None:
        numerator = KernelSpec("tilted", t_star, delta)
    if denominator is None:
        denominator = KernelSpec("base")
    T = log.horizon if T is None else T
    ll = LogLikelihood(log.initial.tolist(), log.n, numerator, denominator)
    for t, a, b in zip(log.times.tolist(), log.e_in.tolist(), log.e_out.tolist()):
        ll.event(t, a[0], a[1], b[0], b[1])
        if ll.value == -math.inf:
            break
    if ll.value != -math.inf:
        ll.advance(T)
    return (ll.value, ll.diag) if with_diag else ll.value


@dataclass(frozen=True)
class FlowFunctional:
    """``F(t, q) = weight(q) * 1[t < until]`` with a pair-symmetric weight.

    ``kind`` selects the weight: ``"one"`` (counts collisions) or
    ``"log_merge"``, the mean over the incoming pair of ``log((1 + 2e)/2)``.
    """

    kind: str = "one"
    until: float = math.inf
    t_star: float | None = None

    def __post_init__(self):
        if self.kind not in ("one", "log_merge", "log_ratio", "zero"):
            raise ValueError(f"unknown flow functional {self.kind!r}")
        if self.kind == "log_ratio" and (self.t_star is None or not self.until < self.t_star):
            raise ValueError("log_ratio needs t_star > until")

    def weight(self, a, b, c, d):
        if self.kind == "one":
            return np.ones_like(np.asarray(a, dtype=float))
        if self.kind == "zero":
            return np.zeros_like(np.asarray(a, dtype=float))
        # log_merge and log_ratio share the energy part
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        return 0.5 * (np.log((1.0 + 2.0 * a) / 2.0) + np.log((1.0 + 2.0 * b) / 2.0))

    def __call__(self, t, a, b, c, d):
        t = np.asarray(t, dtype=float)
        w = self.weight(a, b, c, d)
        before = t < self.until
        if self.kind == "log_ratio":
            # add log(alpha_dot(t)), the time factor of the tilted kernel
            tt = np.where(before, t, 0.0)
            w = w - 2.0 * np.log1p(-tt / self.t_star)
        return np.where(before, w, 0.0)


def flow_integral(log: EventLog, F: FlowFunctional) -> float:
    """``Q^N(F)``: sum of ``F`` over logged collisions, divided by N."""
    if len(log) == 0:
        return 0.0
    vals = F(log.times, log.e_in[:, 0], log.e_in[:, 1], log.e_out[:, 0], log.e_out[:, 1])
    return float(np.sum(vals)) / log.n


def _truncated_means(log: EventLog, times, cap: int) -> np.ndarray:
    """``pi_t(min(e, cap))`` at the given times (cadlag)."""
    e = log.initial
    acc = float(np.minimum(e, cap).sum())
    out = np.empty(len(times))
    k = 0
    ev_t = log.times
    lost = np.minimum(log.e_in, cap).sum(axis=1) if len(log) else np.zeros(0)
    gained = np.minimum(log.e_out, cap).sum(axis=1) if len(log) else np.zeros(0)
    for g, t in enumerate(times):
        while k < ev_t.size and ev_t[k] <= t:
            acc += float(gained[k] - lost[k])
            k += 1
        out[g] = acc / log.n
    return out


@dataclass
class NeighborhoodSpec:
    """Finite set of observables with targets and tolerances.

    A path is inside when, at every checkpoint, the truncated mean
    ``pi_t(min(e, cap))`` is within ``eta_mean`` of its target, and every
    flow integral is within ``flow_rel_tol`` (relative) of its target.
    """

    checkpoints: tuple
    mean_targets: tuple
    eta_mean: float
    cap: int
    flows: tuple = ()
    flow_targets: tuple = ()
    flow_rel_tol: float = 0.1

    def __post_init__(self):
        if len(self.checkpoints) != len(self.mean_targets):
            raise ValueError("one mean target per checkpoint")
        if len(self.flows) != len(self.flow_targets):
            raise ValueError("one target per flow functional")
        if not (self.eta_mean > 0 and self.flow_rel_tol > 0):
            raise ValueError("tolerances must be positive")

    @classmethod
    def everything(cls) -> "NeighborhoodSpec":
        return cls((), (), math.inf, 1, (), (), math.inf)

    def observe(self, log: EventLog) -> tuple[np.ndarray, np.ndarray]:
        means = _truncated_means(log, self.checkpoints, self.cap)
        flows = np.array([flow_integral(log, F) for F in self.flows])
        return means, flows

    def contains(self, means, flows) -> bool:
        ok = np.all(np.abs(np.asarray(means) - np.asarray(self.mean_targets)) <= self.eta_mean)
        tgt = np.asarray(self.flow_targets, dtype=float)
        ok &= np.all(np.abs(np.asarray(flows) - tgt) <= self.flow_rel_tol * np.abs(tgt))
        return bool(ok)

    def to_dict(self) -> dict:
        return {
            "checkpoints": list(self.checkpoints),
            "mean_targets": list(self.mean_targets),
            "eta_mean": self.eta_mean,
            "cap": self.cap,
            "flows": [{"kind": F.kind, "until": F.until, "t_star": F.t_star} for F in self.flows],
            "flow_targets": list(self.flow_targets),
            "flow_rel_tol": self.flow_rel_tol,
        }


def bar_targets(m: BaseMeasure, t_star: float, delta: float, T: float, e: float | None = None,
                cap: int = 2, n_alpha: int = 4000, eta_mean: float | None = None,
                flow_rel_tol: float = 0.1, second: str = "log_merge") -> NeighborhoodSpec:
    """Default neighborhood of the frozen evaporating path.

    Checkpoints ``t*/2, t* - delta, (t* + T)/2, T``; truncated means with
    ``cap``; flow functionals ``F = 1`` and ``second``, both switched off
    from ``t* - delta``.  ``second="log_ratio"`` uses the full log of the
    tilted-to-base rate ratio on merges instead of its energy part.
    """
    cut = t_star - delta
    f0 = _initial_for_bar(m, e)
    a_cut = alpha(cut, t_star)
    ag = np.linspace(0.0, a_cut, n_alpha + 1)
    checkpoints = (0.5 * t_star, cut, 0.5 * (t_star + T), T)
    a_half = alpha(0.5 * t_star, t_star)
    grid = np.unique(np.concatenate([ag, [a_half]]))
    sol = solve_mbe(f0, grid)
    eps = sol.energies
    trunc = np.minimum(eps, cap).astype(float)
    k_half = int(np.searchsorted(grid, a_half))
    at_half = float(sol.masses[k_half] @ trunc)
    at_cut = float(sol.masses[-1] @ trunc)
    means = (at_half, at_cut, at_cut, at_cut)
    pos = eps >= 1
    sq = sol.masses[:, pos] ** 2
    logw = np.log((1.0 + 2.0 * eps[pos]) / 2.0)
    # merge flux in alpha-time: 1/2 f(e)^2 per level
    total = 0.5 * simpson(sq.sum(axis=1), x=grid)
    if second == "log_ratio":
        logw_t = logw[None, :] + 2.0 * np.log1p(grid / t_star)[:, None]
        logm = 0.5 * simpson((sq * logw_t).sum(axis=1), x=grid)
    else:
        logm = 0.5 * simpson(sq @ logw, x=grid)
    flows = (FlowFunctional("one", cut), FlowFunctional(second, cut, t_star if second == "log_ratio" else None))
    mean_e = m.mean() if e is None else e
    return NeighborhoodSpec(
        checkpoints=checkpoints,
        mean_targets=means,
        eta_mean=0.1 * mean_e if eta_mean is None else eta_mean,
        cap=cap,
        flows=flows,
        flow_targets=(total, logm),
        flow_rel_tol=flow_rel_tol,
    )


def replica_seed(master_seed: int, n: int, index: int) -> np.random.SeedSequence:
    """Seed of replica ``index`` at size ``n``: a function of the three integers only."""
    return np.random.SeedSequence([int(master_seed), int(n), int(index)])


@dataclass
class ReplicaStats:
    """Per-replica records; aggregates are computed from them on demand."""

    n: int
    index: np.ndarray
    log_rn: np.ndarray
    diag: np.ndarray
    means: np.ndarray
    flows: np.ndarray
    hit: np.ndarray
    events: np.ndarray
    info: dict = field(default_factory=dict)

    def __len__(self):
        return int(self.index.size)

    @classmethod
    def from_records(cls, n: int, records: list[dict], info: dict | None = None) -> "ReplicaStats":
        records = sorted(records, key=lambda r: r["index"])
        k_means = len(records[0]["means"]) if records else 0
        k_flows = len(records[0]["flows"]) if records else 0
        return cls(
            n=n,
            index=np.array([r["index"] for r in records], dtype=np.int64),
            log_rn=np.array([r["log_rn"] for r in records], dtype=float),
            diag=np.array([r["diag"] for r in records], dtype=float),
            means=np.array([r["means"] for r in records], dtype=float).reshape(len(records), k_means),
            flows=np.array([r["flows"] for r in records], dtype=float).reshape(len(records), k_flows),
            hit=np.array([r["hit"] for r in records], dtype=bool),
            events=np.array([r["events"] for r in records], dtype=np.int64),
            info=dict(info or {}),
        )

    def records(self) -> list[dict]:
        return [
            {
                "index": int(self.index[k]),
                "log_rn": float(self.log_rn[k]),
                "diag": float(self.diag[k]),
                "means": self.means[k].tolist(),
                "flows": self.flows[k].tolist(),
                "hit": bool(self.hit[k]),
                "events": int(self.events[k]),
            }
            for k in range(len(self))
        ]

    def merge(self, other: "ReplicaStats") -> "ReplicaStats":
        if other.n != self.n:
            raise ValueError("cannot merge replicas of different N")
        return ReplicaStats.from_records(self.n, self.records() + other.records(), self.info)

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records():
                fh.write(json.dumps(r) + "\n")

    @property
    def hit_rate(self) -> float:
        return float(self.hit.mean()) if len(self) else math.nan

    def unit_mass(self) -> tuple[float, float]:
        """Mean of ``exp(-log_rn)`` and its standard error."""
        w = np.exp(-self.log_rn)
        return float(w.mean()), float(w.std(ddof=1) / math.sqrt(len(w)))


def _one_replica(task) -> dict:
    (m_text, e, n, T, t_star, delta, master_seed, index, nbhd, self_test) = task
    m = BaseMeasure.parse(m_text)
    rng = np.random.default_rng(replica_seed(master_seed, n, index))
    cfg = sample_microcanonical(m, n, e, rng)
    if self_test:
        log = simulate_base(cfg, T, rng, seed=master_seed)
        log_rn, diag = 0.0, 0.0
    else:
        log = simulate_tilted(cfg, T, t_star, delta, rng, seed=master_seed)
        if len(log) and log.times[-1] >= t_star - delta:
            raise AssertionError("tilted simulator produced an event after the cutoff")
        log_rn, diag = log.log_rn, log.diag
    means, flows = nbhd.observe(log)
    return {
        "index": index,
        "log_rn": log_rn,
        "diag": diag,
        "means": means.tolist(),
        "flows": flows.tolist(),
        "hit": nbhd.contains(means, flows),
        "events": len(log),
    }


def _run_chunk(tasks):
    return [_one_replica(t) for t in tasks]


def run_replicas(m: BaseMeasure, e: float, n: int, T: float, t_star: float, delta: float,
                 replicas: int, master_seed: int, nbhd: NeighborhoodSpec,
                 workers: int | None = None, self_test: bool = False, start: int = 0) -> ReplicaStats:
    """Simulate ``replicas`` independent tilted paths (base paths if ``self_test``).

    Results depend only on the arguments, not on ``workers``.
    """
    tasks = [(str(m), e, n, T, t_star, delta, master_seed, k, nbhd, self_test)
             for k in range(start, start + replicas)]
    if workers is None:
        workers = os.cpu_count() or 1
    if workers <= 1 or replicas < 2:
        records = _run_chunk(tasks)
    else:
        size = max(1, math.ceil(len(tasks) / (4 * workers)))
        chunks = [tasks[k:k + size] for k in range(0, len(tasks), size)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = [r for part in pool.map(_run_chunk, chunks) for r in part]
    info = {"m": str(m), "e": e, "T": T, "t_star": t_star, "delta": delta,
            "master_seed": master_seed, "self_test": self_test}
    return ReplicaStats.from_records(n, records, info)


def entropy_estimate(stats: ReplicaStats, n: int | None = None) -> dict:
    """Mean of ``log_rn / N`` over replicas with its standard error.

    The diagonal correction is reported separately and not included.
    """
    n = stats.n if n is None else n
    x = stats.log_rn / n
    r = len(x)
    se = float(x.std(ddof=1) / math.sqrt(r)) if r > 1 else math.nan
    return {
        "entropy": float(x.mean()),
        "stderr": se,
        "diag": float(stats.diag.mean()),
        "replicas": r,
    }


def estimate_rare_probability(stats: ReplicaStats, nbhd: NeighborhoodSpec | None = None,
                              n: int | None = None) -> dict:
    """Importance-sampling estimate of the base-law probability of ``nbhd``.

    ``p_hat = mean(exp(-log_rn) * hit)``.  Computed in log space.  With no
    hits ``p_hat = 0`` and ``hit_rate_upper`` gives the one-sided 95% bound
    ``3/R`` on the tilted hit probability.
    """
    n = stats.n if n is None else n
    if nbhd is None:
        hit = stats.hit
    else:
        hit = np.array([nbhd.contains(a, b) for a, b in zip(stats.means, stats.flows)], dtype=bool)
    r = len(hit)
    out = {"N": n, "replicas": r, "hits": int(hit.sum()), "hit_rate": float(hit.mean()) if r else math.nan}
    if not hit.any():
        out.update({"p_hat": 0.0, "log_p_hat": -math.inf, "log_p_hat_over_N": -math.inf,
                    "stderr": math.nan, "hit_rate_upper": min(1.0, 3.0 / max(r, 1))})
        return out
    lw = np.where(hit, -stats.log_rn, -np.inf)
    log_p = float(logsumexp(lw) - math.log(r))
    # relative standard error of the mean of the weights
    w_rel = np.exp(lw - lw.max())
    mean_rel = w_rel.mean()
    rel_se = float(w_rel.std(ddof=1) / math.sqrt(r) / mean_rel) if r > 1 else math.nan
    out.update({
        "p_hat": math.exp(log_p),
        "log_p_hat": log_p,
        "log_p_hat_over_N": log_p / n,
        "stderr": math.exp(log_p) * rel_se,
        "log_stderr": rel_se,
    })
    return out


def _pair_sums(counts: dict[int, int], kernel: KernelSpec, F: FlowFunctional, power: int):
    """``sum_{i<j} sum_outcomes rate * weight**power`` for the current histogram."""
    levels = sorted(counts)
    total = 0.0
    for x, a in enumerate(levels):
        na = counts[a]
        for b in levels[x:]:
            pairs = na * (na - 1) / 2 if a == b else na * counts[b]
            if pairs == 0:
                continue
            s = a + b
            acc = 0.0
            for c in range(s + 1):
                r = float(kernel.static_rate(a, b, c, s - c))
                if r:
                    acc += r * float(F.weight(a, b, c, s - c)) ** power
            total += pairs * acc
    return total


def martingale_diagnostic(log: EventLog, F: FlowFunctional, kernel: KernelSpec) -> tuple[float, float]:
    """``M_T = Q^N(F) - compensator`` and its predictable quadratic variation.

    Each unordered particle pair jumps to each ordered outcome at rate
    ``kernel / N``; ``Q^N`` has mass ``1/N`` per collision.  So the
    compensator is ``N^-2 int sum_pairs sum_outcomes rate F`` and the
    quadratic variation ``N^-3 int sum_pairs sum_outcomes rate F^2``.  The
    time integrals are exact, ``F`` being constant in time up to ``until``.
    """
    n = log.n
    counts: dict[int, int] = {}
    for x in log.initial.tolist():
        counts[x] = counts.get(x, 0) + 1
    end = min(log.horizon, F.until)
    comp = 0.0
    qv = 0.0
    t_prev = 0.0
    cache: dict[tuple, tuple[float, float]] = {}

    def sums():
        key = tuple(sorted(counts.items()))
        if key not in cache:
            cache[key] = (_pair_sums(counts, kernel, F, 1), _pair_sums(counts, kernel, F, 2))
        return cache[key]

    def step(t):
        nonlocal comp, qv, t_prev
        t = min(t, end)
        if t > t_prev:
            w = kernel.integrated_time_factor(t_prev, t)
            s1, s2 = sums()
            comp += w * s1
            qv += w * s2
            t_prev = t

    for t, a, b in zip(log.times.tolist(), log.e_in.tolist(), log.e_out.tolist()):
        step(t)
        for x in a:
            counts[x] -= 1
            if counts[x] == 0:
                del counts[x]
        for x in b:
            counts[x] = counts.get(x, 0) + 1
    step(log.horizon)
    mt = flow_integral(log, F) - comp / (n * n)
    return mt, qv / n ** 3
