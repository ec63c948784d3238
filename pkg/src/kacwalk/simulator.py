"""Event-driven simulation of the N-particle chain.

The base chain is simulated by thinning: every unordered pair rings at rate
``1/N`` (global rate ``(N-1)/2``), a ring draws ``ell`` uniformly on
``0..e_i+e_j`` and only rings that change the pair are logged.

The tilted chain is simulated in reparametrized time ``s = alpha(t)``, where
it is time-homogeneous: each pair of equal non-zero energies merges at rate
``1/N`` and the winner is a fair coin.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .model import Configuration, KernelSpec, alpha, alpha_inv

__all__ = [
    "EventLog",
    "LogCorruptionError",
    "RateTracker",
    "LogLikelihood",
    "UniformStream",
    "simulate_base",
    "simulate_tilted",
]


class LogCorruptionError(ValueError):
    """An event does not match the replayed configuration."""


@dataclass
class EventLog:
    """Time-ordered effective collisions.

    For event ``k`` particle ``i[k]`` ends with ``e_out[k, 0]`` and ``j[k]``
    with ``e_out[k, 1]``; both pairs are stored sorted ascending.

    Collisions that only exchange the two energies leave the empirical
    measure and flow unchanged and are not events; they are kept in
    ``swaps`` (rows ``(t, i, j)``) so that replay reproduces the labelled
    configuration.
    """

    n: int
    e_total: int
    horizon: float
    initial: np.ndarray
    times: np.ndarray
    i: np.ndarray
    j: np.ndarray
    e_in: np.ndarray
    e_out: np.ndarray
    seed: int | None = None
    kernel: str = "base"
    log_rn: float | None = None
    diag: float | None = None
    extra: dict = field(default_factory=dict)
    swaps: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __len__(self):
        return int(self.times.size)

    @classmethod
    def from_lists(cls, n, e_total, horizon, initial, times, ii, jj, ins, outs, swaps=(), **kw):
        return cls(
            n=n,
            e_total=e_total,
            horizon=float(horizon),
            initial=np.asarray(initial, dtype=np.int64),
            times=np.asarray(times, dtype=float),
            i=np.asarray(ii, dtype=np.int64),
            j=np.asarray(jj, dtype=np.int64),
            e_in=np.asarray(ins, dtype=np.int64).reshape(-1, 2),
            e_out=np.asarray(outs, dtype=np.int64).reshape(-1, 2),
            swaps=np.asarray(swaps, dtype=float).reshape(-1, 3),
            **kw,
        )

    @property
    def initial_configuration(self) -> Configuration:
        return Configuration(self.initial)

    def validate(self) -> None:
        t = self.times
        if t.size:
            if not (np.diff(t) > 0).all():
                raise LogCorruptionError("event times are not strictly increasing")
            if t[0] <= 0 or t[-1] > self.horizon:
                raise LogCorruptionError("event time outside (0, T]")
        st = self.swaps[:, 0] if self.swaps.size else np.zeros(0)
        if st.size and ((np.diff(st) < 0).any() or st[0] <= 0 or st[-1] > self.horizon):
            raise LogCorruptionError("swap times out of order or outside (0, T]")
        if not np.array_equal(self.e_in.sum(axis=1), self.e_out.sum(axis=1)):
            raise LogCorruptionError("event does not conserve energy")
        if int(self.initial.sum()) != self.e_total:
            raise LogCorruptionError("initial energies do not sum to E")
        for _ in self.replay():
            pass

    def replay(self) -> Iterator[tuple[float, list[int]]]:
        """Yield ``(t, energies)`` after each event or swap; energies is a live list."""
        e = self.initial.tolist()
        yield 0.0, e
        times = self.times.tolist()
        sw = self.swaps.tolist()
        k = q = 0
        while k < len(times) or q < len(sw):
            if q < len(sw) and (k == len(times) or sw[q][0] < times[k]):
                t, i, j = sw[q]
                i, j = int(i), int(j)
                e[i], e[j] = e[j], e[i]
                q += 1
                yield t, e
                continue
            t, i, j = times[k], int(self.i[k]), int(self.j[k])
            a, b = e[i], e[j]
            ins = self.e_in[k]
            if sorted((a, b)) != [int(ins[0]), int(ins[1])]:
                raise LogCorruptionError(
                    f"event {k} at t={t}: in-pair {ins.tolist()} but state has ({a}, {b})"
                )
            e[i] = int(self.e_out[k, 0])
            e[j] = int(self.e_out[k, 1])
            k += 1
            yield t, e

    def final_configuration(self) -> Configuration:
        e = None
        for _, e in self.replay():
            pass
        return Configuration(e)

    def header(self) -> dict:
        return {
            "n": self.n,
            "E": self.e_total,
            "T": self.horizon,
            "seed": self.seed,
            "kernel": self.kernel,
            "initial": self.initial.tolist(),
        }

    def to_jsonl(self, path, extra_header: dict | None = None) -> None:
        head = self.header()
        if extra_header:
            head.update(extra_header)
        with open(path, "w") as fh:
            fh.write(json.dumps(head, sort_keys=True) + "\n")
            for k in range(len(self)):
                rec = {
                    "t": float(self.times[k]),
                    "i": int(self.i[k]),
                    "j": int(self.j[k]),
                    "in": [int(x) for x in self.e_in[k]],
                    "out": [int(x) for x in self.e_out[k]],
                }
                fh.write(json.dumps(rec) + "\n")
            for t, i, j in self.swaps.tolist():
                fh.write(json.dumps({"t": t, "i": int(i), "j": int(j), "swap": True}) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "EventLog":
        with open(path) as fh:
            head = json.loads(fh.readline())
            times, ii, jj, ins, outs, swaps = [], [], [], [], [], []
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                if rec.get("swap"):
                    swaps.append((rec["t"], rec["i"], rec["j"]))
                    continue
                times.append(rec["t"])
                ii.append(rec["i"])
                jj.append(rec["j"])
                ins.append(rec["in"])
                outs.append(rec["out"])
        log = cls.from_lists(
            head["n"], head["E"], head["T"], head["initial"], times, ii, jj, ins, outs, swaps,
            seed=head.get("seed"), kernel=head.get("kernel", "base"),
        )
        log.validate()
        return log


class UniformStream:
    """Buffered uniforms from a numpy Generator (cheap scalar draws)."""

    def __init__(self, rng: np.random.Generator, chunk: int = 4096):
        self._rng = rng
        self._chunk = chunk
        self._buf: list[float] = []
        self._pos = 0

    def __call__(self) -> float:
        if self._pos >= len(self._buf):
            self._buf = self._rng.random(self._chunk).tolist()
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        return u


class RateTracker:
    """Energy histogram with running sums of pair rates for one kernel.

    ``pairs`` is the sum over unordered particle pairs of the static rate out
    of that pair; ``diag`` is ``sum_e n_e * loss(e, e)``.
    """

    def __init__(self, energies, kernel: KernelSpec):
        self.kernel = kernel
        self.counts: dict[int, int] = {}
        for x in energies:
            self.counts[x] = self.counts.get(x, 0) + 1
        self.pairs = 0.0
        self.diag = 0.0
        self._recompute()

    def _loss(self, a, b):
        return self.kernel.pair_loss(a, b)

    def _recompute(self):
        lv = sorted(self.counts)
        s = 0.0
        d = 0.0
        for x, a in enumerate(lv):
            na = self.counts[a]
            d += na * self._loss(a, a)
            s += 0.5 * na * (na - 1) * self._loss(a, a)
            for b in lv[x + 1:]:
                s += na * self.counts[b] * self._loss(a, b)
        self.pairs = s
        self.diag = d

    def _remove(self, a):
        na = self.counts[a]
        if self.kernel.kind == "base":
            s = (na - 1) * self._loss(a, a)
            for b, nb in self.counts.items():
                if b != a:
                    s += nb * self._loss(a, b)
            self.pairs -= s
        elif a >= 1:
            self.pairs -= na - 1
        self.diag -= self._loss(a, a)
        if na == 1:
            del self.counts[a]
        else:
            self.counts[a] = na - 1

    def _add(self, a):
        na = self.counts.get(a, 0)
        if self.kernel.kind == "base":
            s = na * self._loss(a, a)
            for b, nb in self.counts.items():
                if b != a:
                    s += nb * self._loss(a, b)
            self.pairs += s
        elif a >= 1:
            self.pairs += na
        self.diag += self._loss(a, a)
        self.counts[a] = na + 1

    def move(self, a, b, c, d):
        """Pair with energies (a, b) becomes (c, d)."""
        # fixed operation order keeps float sums independent of labelling
        a, b = min(a, b), max(a, b)
        c, d = min(c, d), max(c, d)
        self._remove(a)
        self._remove(b)
        self._add(c)
        self._add(d)


class LogLikelihood:
    """Running log-density of one kernel's path law against another.

    Accumulates ``sum log(rate_num/rate_den)`` over events minus the
    integrated difference of total jump rates, plus the diagonal (order 1/N)
    part of that compensator reported separately.
    """

    def __init__(self, energies, n: int, numerator: KernelSpec, denominator: KernelSpec):
        self.n = n
        self.num = RateTracker(energies, numerator)
        self.den = RateTracker(energies, denominator)
        self.value = 0.0
        self.diag = 0.0
        self.t = 0.0

    def advance(self, t: float) -> None:
        a, num, den, n = self.t, self.num, self.den, self.n
        wn = num.kernel.integrated_time_factor(a, t)
        wd = den.kernel.integrated_time_factor(a, t)
        self.value -= (num.pairs * wn - den.pairs * wd) / n
        self.diag += (num.diag * wn - den.diag * wd) / (2.0 * n * n)
        self.t = t

    def event(self, t: float, a: int, b: int, c: int, d: int) -> None:
        a, b = min(a, b), max(a, b)
        c, d = min(c, d), max(c, d)
        self.advance(t)
        rn = self.num.kernel.rate(t, a, b, c, d)
        rd = self.den.kernel.rate(t, a, b, c, d)
        if rn <= 0.0:
            self.value = -math.inf
        elif rd <= 0.0:
            self.value = math.inf
        else:
            self.value += math.log(rn / rd)
        self.num.move(a, b, c, d)
        self.den.move(a, b, c, d)


def _record(times, ii, jj, ins, outs, t, i, j, a, b, c, d):
    # particle listed first receives the smaller outgoing energy
    if c <= d:
        ii.append(i)
        jj.append(j)
    else:
        ii.append(j)
        jj.append(i)
        c, d = d, c
    times.append(t)
    ins.append((a, b) if a <= b else (b, a))
    outs.append((c, d))


def simulate_base(cfg0: Configuration, T: float, rng: np.random.Generator, seed=None) -> EventLog:
    """Exact simulation of the uniform-redistribution chain on [0, T]."""
    if not T > 0:
        raise ValueError("horizon must be positive")
    n = cfg0.n
    rings = int(rng.poisson(0.5 * (n - 1) * T))
    ring_t = np.sort(rng.uniform(0.0, T, rings)).tolist()
    pi = rng.integers(0, n, rings)
    pj = rng.integers(0, n - 1, rings)
    pj = (pj + (pj >= pi)).tolist()
    pi = pi.tolist()
    us = rng.random(rings).tolist()
    e = cfg0.energies.tolist()
    times, ii, jj, ins, outs, swaps = [], [], [], [], [], []
    for t, i, j, u in zip(ring_t, pi, pj, us):
        a, b = e[i], e[j]
        s = a + b
        ell = min(int(u * (s + 1)), s)
        if ell == a:
            continue
        if ell == b:
            e[i], e[j] = b, a
            swaps.append((t, i, j))
            continue
        e[i] = ell
        e[j] = s - ell
        _record(times, ii, jj, ins, outs, t, i, j, a, b, ell, s - ell)
    return EventLog.from_lists(
        n, cfg0.total, T, cfg0.energies, times, ii, jj, ins, outs, swaps, seed=seed, kernel="base"
    )


def simulate_tilted(
    cfg0: Configuration,
    T: float,
    t_star: float,
    delta: float,
    rng: np.random.Generator,
    seed=None,
    track_log_rn: bool = True,
) -> EventLog:
    """Simulate the tilted chain on [0, T]; no events after ``t_star - delta``.

    With ``track_log_rn`` the log-density against the base law is
    accumulated along the path and stored on the log.
    """
    if not 0 < delta < t_star < T:
        raise ValueError("need 0 < delta < t_star < T")
    spec = KernelSpec("tilted", t_star, delta)
    n = cfg0.n
    e = cfg0.energies.tolist()
    buckets: dict[int, list[int]] = {}
    pos = [0] * n
    for k, x in enumerate(e):
        if x >= 1:
            lst = buckets.setdefault(x, [])
            pos[k] = len(lst)
            lst.append(k)

    def take(k, x):
        lst = buckets[x]
        p = pos[k]
        last = lst.pop()
        if last != k:
            lst[p] = last
            pos[last] = p
        if not lst:
            del buckets[x]

    def put(k, x):
        if x >= 1:
            lst = buckets.setdefault(x, [])
            pos[k] = len(lst)
            lst.append(k)

    ll = LogLikelihood(e, n, spec, KernelSpec("base")) if track_log_rn else None
    uni = UniformStream(rng)
    horizon = alpha(t_star - delta, t_star)
    s = 0.0
    times, ii, jj, ins, outs = [], [], [], [], []
    while True:
        weight = 0
        for lst in buckets.values():
            m = len(lst)
            weight += m * (m - 1) // 2
        if weight == 0:
            break
        s += -math.log(1.0 - uni()) * n / weight
        if s >= horizon:
            break
        target = uni() * weight
        for x, lst in buckets.items():
            m = len(lst)
            target -= m * (m - 1) // 2
            if target < 0:
                break
        m = len(lst)
        p1 = min(int(uni() * m), m - 1)
        p2 = min(int(uni() * (m - 1)), m - 2)
        if p2 >= p1:
            p2 += 1
        i, j = lst[p1], lst[p2]
        if uni() < 0.5:
            i, j = j, i
        # i wins the whole energy
        t = alpha_inv(s, t_star)
        if times and t <= times[-1]:
            t = math.nextafter(times[-1], math.inf)
        take(i, x)
        take(j, x)
        e[i] = 2 * x
        e[j] = 0
        put(i, 2 * x)
        if ll is not None:
            ll.event(t, x, x, 2 * x, 0)
        _record(times, ii, jj, ins, outs, t, i, j, x, x, 2 * x, 0)
    log = EventLog.from_lists(
        n, cfg0.total, T, cfg0.energies, times, ii, jj, ins, outs, seed=seed, kernel=str(spec)
    )
    if ll is not None:
        ll.advance(T)
        log.log_rn = ll.value
        log.diag = ll.diag
    return log
