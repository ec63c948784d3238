"""Empirical measure path, empirical flow and the balance equation."""
from __future__ import annotations

import bisect
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .model import CollisionQuad, Configuration
from .simulator import EventLog, LogCorruptionError

__all__ = [
    "MeasurePath",
    "FlowMeasure",
    "TestFunction",
    "empirical_measure",
    "measure_path",
    "empirical_flow",
    "balance_residual",
]


def empirical_measure(cfg: Configuration) -> dict[int, Fraction]:
    """Histogram of energies divided by N, with exact masses."""
    n = cfg.n
    counts = Counter(cfg.energies.tolist())
    return {e: Fraction(c, n) for e, c in sorted(counts.items())}


@dataclass
class MeasurePath:
    """Energy histograms (integer counts) at grid times; masses are counts/N."""

    grid: np.ndarray
    counts: np.ndarray  # shape (len(grid), E+1)
    n: int

    @property
    def masses(self) -> np.ndarray:
        return self.counts / self.n

    def at(self, k: int) -> dict[int, Fraction]:
        row = self.counts[k]
        return {e: Fraction(int(c), self.n) for e, c in enumerate(row) if c}

    def mean(self) -> np.ndarray:
        return self.masses @ np.arange(self.counts.shape[1])

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("t,epsilon,mass\n")
            for t, row in zip(self.grid.tolist(), self.counts):
                for e in np.flatnonzero(row):
                    fh.write(f"{t!r},{e},{row[e] / self.n!r}\n")


def measure_path(log: EventLog, grid) -> MeasurePath:
    """Replay the log and snapshot histograms at grid times (cadlag)."""
    grid = np.asarray(grid, dtype=float)
    if grid.size and (grid.min() < 0 or grid.max() > log.horizon):
        raise ValueError("grid must lie in [0, T]")
    if grid.size > 1 and (np.diff(grid) < 0).any():
        raise ValueError("grid must be non-decreasing")
    width = log.e_total + 1
    counts = np.zeros((grid.size, width), dtype=np.int64)
    # swaps leave the histogram unchanged, so event deltas suffice
    hist = np.bincount(log.initial, minlength=width).astype(np.int64)
    ev_t = log.times
    k = 0
    for g, t in enumerate(grid.tolist()):
        while k < ev_t.size and ev_t[k] <= t:
            np.subtract.at(hist, log.e_in[k], 1)
            np.add.at(hist, log.e_out[k], 1)
            if hist[log.e_in[k]].min() < 0:
                raise LogCorruptionError(f"event {k} at t={ev_t[k]}: in-pair not present")
            k += 1
        counts[g] = hist
    return MeasurePath(grid, counts, log.n)


@dataclass
class FlowMeasure:
    """Empirical flow: mass 1/N per logged collision.

    Kept atomic (event times plus sorted in/out pairs).  :meth:`binned`
    gives the time-binned form used for CSV output and large logs.
    """

    n: int
    times: np.ndarray
    e_in: np.ndarray
    e_out: np.ndarray

    @property
    def total_mass(self) -> Fraction:
        return Fraction(self.times.size, self.n)

    def atoms(self) -> dict[CollisionQuad, list[float]]:
        out: dict[CollisionQuad, list[float]] = {}
        for t, a, b in zip(self.times.tolist(), self.e_in.tolist(), self.e_out.tolist()):
            out.setdefault(CollisionQuad(tuple(a), tuple(b)), []).append(t)
        return out

    def integrate(self, F) -> float:
        """``Q(F)`` for ``F(t, e, es, ep, esp)`` symmetric under pair swaps."""
        s = 0.0
        for t, a, b in zip(self.times.tolist(), self.e_in.tolist(), self.e_out.tolist()):
            s += F(t, a[0], a[1], b[0], b[1])
        return s / self.n

    def binned(self, edges) -> dict[tuple[int, CollisionQuad], Fraction]:
        edges = np.asarray(edges, dtype=float)
        idx = np.clip(np.searchsorted(edges, self.times, side="right") - 1, 0, edges.size - 2)
        out: dict[tuple[int, CollisionQuad], Fraction] = {}
        for k, a, b in zip(idx.tolist(), self.e_in.tolist(), self.e_out.tolist()):
            key = (k, CollisionQuad(tuple(a), tuple(b)))
            out[key] = out.get(key, Fraction(0)) + Fraction(1, self.n)
        return out

    def to_csv(self, path, edges) -> None:
        edges = np.asarray(edges, dtype=float)
        with open(path, "w") as fh:
            fh.write("t_bin_lo,t_bin_hi,e1,e2,e1p,e2p,mass\n")
            for (k, q), m in sorted(self.binned(edges).items(), key=lambda kv: (kv[0][0], kv[0][1].e_in, kv[0][1].e_out)):
                fh.write(
                    f"{edges[k]!r},{edges[k + 1]!r},{q.e_in[0]},{q.e_in[1]},"
                    f"{q.e_out[0]},{q.e_out[1]},{float(m)!r}\n"
                )


def empirical_flow(log: EventLog) -> FlowMeasure:
    return FlowMeasure(log.n, log.times.copy(), log.e_in.copy(), log.e_out.copy())


class TestFunction:
    """Bounded test function tabulated on a time grid and energies 0..cap.

    ``values[k, e]`` is phi at ``grid[k]``; energies above ``cap`` take the
    per-time ``tail`` value.  ``dvalues``/``dtail`` hold the time derivative
    on the same table.  Off-grid times use linear interpolation.
    """

    __test__ = False  # keep pytest from collecting this class

    def __init__(self, grid, values, tail, dvalues=None, dtail=None):
        self.grid = np.asarray(grid, dtype=float)
        self.values = np.asarray(values)
        self.tail = np.asarray(tail)
        self.dvalues = None if dvalues is None else np.asarray(dvalues, dtype=float)
        self.dtail = None if dtail is None else np.asarray(dtail, dtype=float)
        self.cap = self.values.shape[1] - 1

    @classmethod
    def static(cls, table, tail=None):
        """Time-independent phi; entries may be ints or Fractions."""
        table = list(table)
        tail = table[-1] if tail is None else tail
        vals = np.empty((1, len(table)), dtype=object)
        vals[0, :] = table
        tails = np.empty(1, dtype=object)
        tails[0] = tail
        return cls(np.array([0.0]), vals, tails)

    @classmethod
    def from_callable(cls, phi, dphi, grid, cap):
        grid = np.asarray(grid, dtype=float)
        eps = np.arange(cap + 2)
        vals = np.array([[phi(t, e) for e in eps] for t in grid], dtype=float)
        dvals = np.array([[dphi(t, e) for e in eps] for t in grid], dtype=float)
        return cls(grid, vals[:, :-1], vals[:, -1], dvals[:, :-1], dvals[:, -1])

    @property
    def time_dependent(self) -> bool:
        return self.grid.size > 1

    def _lookup(self, table, tail, t, e):
        col = tail if e > self.cap else table[:, e]
        if self.grid.size == 1:
            return col[0]
        return float(np.interp(t, self.grid, col))

    def __call__(self, t, e):
        return self._lookup(self.values, self.tail, t, e)

    def dt(self, t, e):
        if self.dvalues is None:
            return 0.0
        return self._lookup(self.dvalues, self.dtail, t, e)


def balance_residual(path: MeasurePath, flow: FlowMeasure, phi: TestFunction, exact: bool = False):
    """Left-hand side of the balance equation for one realized path.

    The time integral of ``pi_t(d phi_t / dt)`` is computed cell by cell on
    the path grid, splitting each cell at event times and applying the
    trapezoid rule on each piece (pi is constant between events).  With a
    time-independent ``phi`` and ``exact=True`` the result is an exact
    Fraction.
    """
    n = path.n
    width = path.counts.shape[1]
    T = float(path.grid[-1])
    t0 = float(path.grid[0])

    def pi_phi(counts, t):
        nz = np.flatnonzero(counts)
        if exact:
            return sum((Fraction(int(counts[e]), n) * Fraction(phi(t, int(e))) for e in nz), Fraction(0))
        return float(sum(counts[e] * phi(t, int(e)) for e in nz)) / n

    res = pi_phi(path.counts[-1], T) - pi_phi(path.counts[0], t0)

    times = flow.times.tolist()
    collide = Fraction(0) if exact else 0.0
    for t, a, b in zip(times, flow.e_in.tolist(), flow.e_out.tolist()):
        if not t0 < t <= T:
            continue
        val = phi(t, a[0]) + phi(t, a[1]) - phi(t, b[0]) - phi(t, b[1])
        collide += Fraction(val) / n if exact else val / n
    res += collide

    if phi.time_dependent and not exact:
        res -= _integrate_dphi(path, flow, phi, width)
    return res


def _integrate_dphi(path, flow, phi, width):
    n = path.n
    times = flow.times
    total = 0.0
    for k in range(path.grid.size - 1):
        a, b = float(path.grid[k]), float(path.grid[k + 1])
        if b <= a:
            continue
        hist = path.counts[k].astype(np.int64).copy()
        lo = bisect.bisect_right(times, a)
        hi = bisect.bisect_right(times, b)
        cuts = [a] + times[lo:hi].tolist() + [b]
        for m in range(len(cuts) - 1):
            u, v = cuts[m], cuts[m + 1]
            if v > u:
                nz = np.flatnonzero(hist)
                fu = sum(hist[e] * phi.dt(u, int(e)) for e in nz)
                fv = sum(hist[e] * phi.dt(v, int(e)) for e in nz)
                total += 0.5 * (v - u) * (fu + fv) / n
            if m < hi - lo:
                ein = flow.e_in[lo + m]
                eout = flow.e_out[lo + m]
                hist[ein[0]] -= 1
                hist[ein[1]] -= 1
                hist[eout[0]] += 1
                hist[eout[1]] += 1
    return total
