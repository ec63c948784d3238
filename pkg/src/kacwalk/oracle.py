"""Exact finite-state computations for small (N, E)."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from math import comb

import numpy as np
from scipy.stats import poisson

__all__ = [
    "StateSpace",
    "Generator",
    "enumerate_states",
    "generator_matrix",
    "transient_distribution",
]


@dataclass(frozen=True)
class StateSpace:
    n: int
    total: int
    states: tuple[tuple[int, ...], ...]

    def __len__(self):
        return len(self.states)

    def index(self, state) -> int:
        return self._index[tuple(int(x) for x in state)]

    @property
    def _index(self):
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {s: k for k, s in enumerate(self.states)}
            object.__setattr__(self, "_idx", idx)
        return idx


def _compositions(n, total):
    if n == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(n - 1, total - first):
            yield (first,) + rest


def enumerate_states(n: int, total: int, cap: int = 200_000) -> StateSpace:
    """All vectors of ``n`` non-negative integers summing to ``total``, in lexicographic order."""
    size = comb(total + n - 1, n - 1)
    if size > cap:
        raise MemoryError(f"|Sigma_(N={n}, E={total})| = {size} exceeds cap {cap}")
    return StateSpace(n, total, tuple(_compositions(n, total)))


@dataclass
class Generator:
    """Sparse generator with exact rational rates."""

    space: StateSpace
    rates: dict[tuple[int, int], Fraction]

    def dense(self) -> np.ndarray:
        g = np.zeros((len(self.space), len(self.space)))
        for (x, y), r in self.rates.items():
            g[x, y] = float(r)
        return g

    def row_sums(self) -> list[Fraction]:
        sums = [Fraction(0)] * len(self.space)
        for (x, _), r in self.rates.items():
            sums[x] += r
        return sums

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("from,to,rate_num,rate_den,rate\n")
            for (x, y), r in sorted(self.rates.items()):
                a = " ".join(map(str, self.space.states[x]))
                b = " ".join(map(str, self.space.states[y]))
                fh.write(f"{a},{b},{r.numerator},{r.denominator},{float(r)!r}\n")


def generator_matrix(space: StateSpace) -> Generator:
    """Generator of the uniform-redistribution chain, rates as Fractions."""
    n = space.n
    rates: dict[tuple[int, int], Fraction] = {}
    for x, state in enumerate(space.states):
        out = Fraction(0)
        for i in range(n):
            for j in range(i + 1, n):
                s = state[i] + state[j]
                r = Fraction(1, n * (s + 1))
                for ell in range(s + 1):
                    if ell == state[i]:
                        continue
                    new = list(state)
                    new[i], new[j] = ell, s - ell
                    y = space.index(new)
                    rates[(x, y)] = rates.get((x, y), Fraction(0)) + r
                    out += r
        rates[(x, x)] = -out
    return Generator(space, rates)


def transient_distribution(gen, t: float, init, tol: float = 1e-13) -> np.ndarray:
    """``init @ expm(t G)`` by uniformization."""
    g = gen.dense() if isinstance(gen, Generator) else np.asarray(gen, dtype=float)
    p = np.asarray(init, dtype=float).copy()
    if t == 0:
        return p
    lam = float(np.max(-np.diag(g)))
    if lam == 0:
        return p
    P = np.eye(g.shape[0]) + g / lam
    mu = lam * t
    kmax = int(poisson.isf(tol, mu)) + 1
    weights = poisson.pmf(np.arange(kmax + 1), mu)
    out = np.zeros_like(p)
    v = p
    for k in range(kmax + 1):
        out += weights[k] * v
        v = v @ P
    out = np.clip(out, 0.0, None)
    return out / out.sum()
