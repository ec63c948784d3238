"""Configurations, the collision map and the three collision kernels.

Kernels are functions of *ordered* quadruples ``(e, es, ep, esp)``: an
incoming pair ``(e, es)`` producing the outgoing pair ``(ep, esp)``.  With
integer inputs they return exact :class:`fractions.Fraction` values; the
simulators and solvers convert to float at their own boundaries.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "Configuration",
    "CollisionQuad",
    "KernelSpec",
    "collision_outcome",
    "kernel_base",
    "kernel_modified",
    "kernel_tilted",
    "alpha",
    "alpha_inv",
    "alpha_dot",
    "base_loss_rate",
    "n_same",
]


class Configuration:
    """N non-negative integer energies with a cached total.

    Instances are treated as immutable: :func:`collision_outcome` returns a
    new configuration.
    """

    __slots__ = ("_energies", "_total")

    def __init__(self, energies: Sequence[int]):
        arr = np.asarray(energies, dtype=np.int64)
        if arr.ndim != 1 or arr.size < 2:
            raise ValueError("a configuration needs at least two particles")
        if (arr < 0).any():
            raise ValueError("energies must be non-negative")
        arr.setflags(write=False)
        self._energies = arr
        self._total = int(arr.sum())

    @property
    def energies(self) -> np.ndarray:
        return self._energies

    @property
    def total(self) -> int:
        return self._total

    @property
    def n(self) -> int:
        return int(self._energies.size)

    def check(self) -> None:
        if int(self._energies.sum()) != self._total:
            raise AssertionError("cached total out of sync with energies")
        if (self._energies < 0).any():
            raise AssertionError("negative energy in configuration")

    def __eq__(self, other):
        if not isinstance(other, Configuration):
            return NotImplemented
        return np.array_equal(self._energies, other._energies)

    def __hash__(self):
        return hash(self._energies.tobytes())

    def __repr__(self):
        return f"Configuration({self._energies.tolist()})"


def collision_outcome(cfg: Configuration, i: int, j: int, ell: int) -> Configuration:
    """Apply the collision map: particle ``i`` gets ``ell``, ``j`` the rest.

    Indices are zero-based.
    """
    n = cfg.n
    if not (0 <= i < n and 0 <= j < n) or i == j:
        raise ValueError(f"invalid pair ({i}, {j}) for N={n}")
    s = int(cfg.energies[i]) + int(cfg.energies[j])
    if not 0 <= ell <= s:
        raise ValueError(f"ell={ell} outside [0, {s}]")
    out = cfg.energies.copy()
    out[i] = ell
    out[j] = s - ell
    new = Configuration(out)
    assert new.total == cfg.total
    return new


@dataclass(frozen=True)
class CollisionQuad:
    """Unordered incoming pair -> unordered outgoing pair, stored sorted."""

    e_in: tuple[int, int]
    e_out: tuple[int, int]

    @classmethod
    def of(cls, e: int, es: int, ep: int, esp: int) -> "CollisionQuad":
        for x in (e, es, ep, esp):
            if x < 0:
                raise ValueError("energies in a quad must be non-negative")
        return cls(tuple(sorted((int(e), int(es)))), tuple(sorted((int(ep), int(esp)))))

    def __post_init__(self):
        if tuple(sorted(self.e_in)) != self.e_in or tuple(sorted(self.e_out)) != self.e_out:
            raise ValueError("CollisionQuad pairs must be stored sorted; use CollisionQuad.of")

    @property
    def conserving(self) -> bool:
        return sum(self.e_in) == sum(self.e_out)

    @property
    def identity(self) -> bool:
        return self.e_in == self.e_out

    def reverse(self) -> "CollisionQuad":
        return CollisionQuad(self.e_out, self.e_in)

    @property
    def multiplicity(self) -> int:
        """Number of ordered quadruples represented by this canonical quad."""
        m_in = 1 if self.e_in[0] == self.e_in[1] else 2
        m_out = 1 if self.e_out[0] == self.e_out[1] else 2
        return m_in * m_out

    def ordered(self) -> Iterator[tuple[int, int, int, int]]:
        ins = {self.e_in, self.e_in[::-1]}
        outs = {self.e_out, self.e_out[::-1]}
        for a, b in sorted(ins):
            for c, d in sorted(outs):
                yield (a, b, c, d)


def n_same(e: int, es: int) -> int:
    """Number of ordered outcomes of a pair that leave it unchanged."""
    return 1 if e == es else 2


def kernel_base(e: int, es: int, ep: int, esp: int) -> Fraction:
    """Uniform redistribution kernel: ``1/(e+es+1)`` on non-identity outcomes."""
    if e + es != ep + esp:
        return Fraction(0)
    if sorted((e, es)) == sorted((ep, esp)):
        return Fraction(0)
    return Fraction(1, e + es + 1)


def kernel_modified(e: int, es: int, ep: int, esp: int) -> Fraction:
    """Equal energies merge: the whole energy goes to one particle."""
    if e != es or e + es != ep + esp:
        return Fraction(0)
    if sorted((e, es)) == sorted((ep, esp)):
        return Fraction(0)
    s = e + es
    return Fraction(int(ep == s) + int(esp == s), 2)


def base_loss_rate(e: int, es: int) -> Fraction:
    """Total base rate out of an ordered pair, summed over ordered outcomes."""
    s = e + es
    return Fraction(s + 1 - n_same(e, es), s + 1)


def _check_tstar(t_star: float) -> None:
    if not t_star > 0:
        raise ValueError("t_star must be positive")


def alpha(t: float, t_star: float) -> float:
    """Time change ``t/(1 - t/t_star)`` mapping [0, t_star) onto [0, inf)."""
    _check_tstar(t_star)
    if not 0 <= t < t_star:
        raise ValueError(f"alpha needs 0 <= t < t_star, got t={t}")
    return t / (1.0 - t / t_star)


def alpha_inv(s: float, t_star: float) -> float:
    _check_tstar(t_star)
    if s < 0:
        raise ValueError("alpha_inv needs s >= 0")
    return s / (1.0 + s / t_star)


def alpha_dot(t: float, t_star: float) -> float:
    _check_tstar(t_star)
    if not 0 <= t < t_star:
        raise ValueError(f"alpha_dot needs 0 <= t < t_star, got t={t}")
    return 1.0 / (1.0 - t / t_star) ** 2


def kernel_tilted(t: float, e: int, es: int, ep: int, esp: int, t_star: float, delta: float):
    """Time-dependent tilted kernel; zero from ``t_star - delta`` on."""
    if not 0 < delta < t_star:
        raise ValueError("need 0 < delta < t_star")
    if t >= t_star - delta:
        return 0.0
    base = kernel_modified(e, es, ep, esp)
    if base == 0:
        return 0.0
    return alpha_dot(t, t_star) * float(base)


@dataclass(frozen=True)
class KernelSpec:
    """One of the three kernels, with time-dependent rate evaluation.

    ``rate`` takes an ordered quadruple; ``pair_loss`` is the static total
    rate out of an ordered pair, before the time factor.
    """

    kind: str = "base"
    t_star: float | None = None
    delta: float | None = None

    def __post_init__(self):
        if self.kind not in ("base", "modified", "tilted"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "tilted":
            if self.t_star is None or self.delta is None:
                raise ValueError("tilted kernel needs t_star and delta")
            if not 0 < self.delta < self.t_star:
                raise ValueError("tilted kernel needs 0 < delta < t_star")

    @classmethod
    def parse(cls, text: str) -> "KernelSpec":
        """Parse ``base``, ``modified`` or ``tilted:t_star,delta``."""
        text = text.strip()
        if text.startswith("tilted"):
            _, _, rest = text.partition(":")
            t_star, delta = (float(x) for x in rest.split(","))
            return cls("tilted", t_star, delta)
        return cls(text)

    def __str__(self):
        if self.kind == "tilted":
            return f"tilted:{self.t_star!r},{self.delta!r}"
        return self.kind

    @property
    def cutoff(self) -> float:
        """First time at which the kernel vanishes identically."""
        if self.kind == "tilted":
            return self.t_star - self.delta
        return math.inf

    def time_factor(self, t: float) -> float:
        if self.kind != "tilted":
            return 1.0
        if t >= self.cutoff:
            return 0.0
        return alpha_dot(t, self.t_star)

    def integrated_time_factor(self, a: float, b: float) -> float:
        """Integral of :meth:`time_factor` over [a, b]."""
        if self.kind != "tilted":
            return b - a
        c = self.cutoff
        a, b = min(a, c), min(b, c)
        if b <= a:
            return 0.0
        return alpha(b, self.t_star) - alpha(a, self.t_star)

    def static_rate(self, e: int, es: int, ep: int, esp: int) -> Fraction:
        if self.kind == "base":
            return kernel_base(e, es, ep, esp)
        return kernel_modified(e, es, ep, esp)

    def rate(self, t: float, e: int, es: int, ep: int, esp: int) -> float:
        return self.time_factor(t) * float(self.static_rate(e, es, ep, esp))

    def pair_loss(self, e: int, es: int) -> float:
        """Static total rate out of an ordered pair (before time factor)."""
        if self.kind == "base":
            s = e + es
            return (s + (0 if e == es else -1)) / (s + 1)
        return 1.0 if (e == es and e >= 1) else 0.0
