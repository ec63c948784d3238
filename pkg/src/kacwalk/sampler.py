"""Base measures, exponential tilting and microcanonical sampling."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import logsumexp

from .model import Configuration

__all__ = [
    "BaseMeasure",
    "TiltedMeasure",
    "SamplingError",
    "partition_function",
    "tilt",
    "gamma_for_mean",
    "sample_microcanonical",
    "microcanonical_marginal",
]


class SamplingError(RuntimeError):
    """Rejection sampling exceeded its attempt cap."""


@dataclass(frozen=True)
class BaseMeasure:
    """A probability on the non-negative integers.

    ``family`` is ``"point"`` (param ``e0``), ``"geom"`` (param ``p``,
    ``m(k) = p (1-p)^k``) or ``"finite"`` (``weights`` on ``0..K``).
    """

    family: str
    e0: int | None = None
    p: float | None = None
    weights: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.family == "point":
            if self.e0 is None or self.e0 < 1 or int(self.e0) != self.e0:
                raise ValueError("point mass needs an integer atom e0 >= 1")
        elif self.family == "geom":
            if self.p is None or not 0 < self.p < 1:
                raise ValueError("geometric measure needs 0 < p < 1")
        elif self.family == "finite":
            w = np.asarray(self.weights, dtype=float)
            if w.size == 0 or (w < 0).any() or w.sum() <= 0:
                raise ValueError("finite measure needs non-negative weights with positive sum")
            object.__setattr__(self, "weights", tuple(float(x) for x in w / w.sum()))
            support = np.flatnonzero(np.asarray(self.weights) > 0)
            if support.size > 1 and math.gcd(*(int(x) for x in np.diff(support))) != 1:
                raise ValueError("support generates a proper sub-lattice of Z")
        else:
            raise ValueError(f"unknown base measure family {self.family!r}")

    @classmethod
    def parse(cls, text: str) -> "BaseMeasure":
        """Parse ``point:e0``, ``geom:p`` or ``finite:w0,w1,...``."""
        kind, _, arg = text.strip().partition(":")
        if kind == "point":
            return cls("point", e0=int(arg))
        if kind == "geom":
            return cls("geom", p=float(arg))
        if kind == "finite":
            return cls("finite", weights=tuple(float(x) for x in arg.split(",")))
        raise ValueError(f"cannot parse base measure {text!r}")

    def __str__(self):
        if self.family == "point":
            return f"point:{self.e0}"
        if self.family == "geom":
            return f"geom:{self.p!r}"
        return "finite:" + ",".join(repr(w) for w in self.weights)

    @property
    def gamma_star(self) -> float:
        if self.family == "geom":
            return -math.log1p(-self.p)
        return math.inf

    @property
    def is_point(self) -> bool:
        return self.family == "point"

    def pmf(self, eps) -> np.ndarray:
        eps = np.asarray(eps)
        if self.family == "point":
            return (eps == self.e0).astype(float)
        if self.family == "geom":
            return np.where(eps >= 0, self.p * (1 - self.p) ** np.maximum(eps, 0), 0.0)
        w = np.asarray(self.weights)
        inside = (eps >= 0) & (eps < w.size)
        return np.where(inside, w[np.clip(eps, 0, w.size - 1)], 0.0)

    def mean(self) -> float:
        return tilt(self, 0.0).mean()


@dataclass(frozen=True)
class TiltedMeasure:
    """``m_gamma(k) = exp(gamma k) m(k) / Z_gamma``."""

    base: BaseMeasure
    gamma: float

    def __post_init__(self):
        if not self.gamma < self.base.gamma_star:
            raise ValueError("gamma must lie below gamma_star")

    @property
    def _ratio(self) -> float:
        # tilted geometric is geometric with ratio (1-p) e^gamma
        return (1 - self.base.p) * math.exp(self.gamma)

    def pmf(self, eps) -> np.ndarray:
        eps = np.asarray(eps)
        m = self.base
        if m.family == "point":
            return m.pmf(eps)
        if m.family == "geom":
            r = self._ratio
            return np.where(eps >= 0, (1 - r) * r ** np.maximum(eps, 0), 0.0)
        logw = self._finite_logw()
        inside = (eps >= 0) & (eps < logw.size)
        return np.where(inside, np.exp(logw[np.clip(eps, 0, logw.size - 1)]), 0.0)

    def _finite_logw(self) -> np.ndarray:
        w = np.asarray(self.base.weights)
        with np.errstate(divide="ignore"):
            lw = np.log(w) + self.gamma * np.arange(w.size)
        return lw - logsumexp(lw)

    def mean(self) -> float:
        m = self.base
        if m.family == "point":
            return float(m.e0)
        if m.family == "geom":
            r = self._ratio
            return r / (1 - r)
        return float(np.exp(self._finite_logw()) @ np.arange(len(m.weights)))

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        m = self.base
        if m.family == "point":
            return np.full(size, m.e0, dtype=np.int64)
        if m.family == "geom":
            return rng.geometric(1 - self._ratio, size=size).astype(np.int64) - 1
        probs = np.exp(self._finite_logw())
        return rng.choice(probs.size, size=size, p=probs / probs.sum()).astype(np.int64)


def tilt(m: BaseMeasure, gamma: float) -> TiltedMeasure:
    return TiltedMeasure(m, gamma)


def partition_function(m: BaseMeasure, gamma: float) -> float:
    """``Z_gamma = sum_k m(k) exp(gamma k)``."""
    if not gamma < m.gamma_star:
        raise ValueError(f"gamma={gamma} is not below gamma_star={m.gamma_star}")
    if m.family == "point":
        return math.exp(gamma * m.e0)
    if m.family == "geom":
        return m.p / (1 - (1 - m.p) * math.exp(gamma))
    w = np.asarray(m.weights)
    with np.errstate(divide="ignore"):
        return float(np.exp(logsumexp(np.log(w) + gamma * np.arange(w.size))))


def gamma_for_mean(m: BaseMeasure, e: float, tol: float = 1e-12) -> float:
    """Tilt exponent whose tilted measure has mean ``e``.

    Point masses return 0 (the atom must equal ``e``).
    """
    if m.family == "point":
        if e != m.e0:
            raise ValueError(f"point mass at {m.e0} cannot have mean {e}")
        return 0.0
    if m.family == "finite":
        support = np.flatnonzero(np.asarray(m.weights) > 0)
        lo_mean, hi_mean = support[0], support[-1]
        if not lo_mean < e < hi_mean:
            raise ValueError(f"mean {e} not reachable, must lie in ({lo_mean}, {hi_mean})")
    elif not e > 0:
        raise ValueError("target mean must be positive")

    def gap(g):
        return tilt(m, g).mean() - e

    if abs(gap(0.0)) <= tol:
        return 0.0
    lo, hi = -1.0, min(1.0, 0.5 * m.gamma_star)
    while gap(lo) > 0:
        lo *= 2
        if lo < -1e4:
            raise ValueError(f"mean {e} not reachable")
    while gap(hi) < 0:
        if math.isfinite(m.gamma_star):
            hi = 0.5 * (hi + m.gamma_star)
            if m.gamma_star - hi < 1e-15:
                raise ValueError(f"mean {e} not reachable")
        else:
            hi *= 2
            if hi > 1e4:
                raise ValueError(f"mean {e} not reachable")
    g = brentq(gap, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    if abs(gap(g)) > max(tol, 1e-12 * e):
        raise ValueError(f"bisection did not reach tolerance for mean {e}")
    return g


def sample_microcanonical(
    m: BaseMeasure,
    n: int,
    e: float,
    rng: np.random.Generator,
    max_attempts: int | None = None,
    batch: int = 256,
) -> Configuration:
    """Draw i.i.d. ``m`` energies conditioned on total ``floor(n e)``.

    Draws from the measure tilted to mean ``e`` (which leaves the conditional
    law unchanged) and rejects until the total matches.
    """
    total = math.floor(n * e)
    if m.family == "point":
        if total != n * m.e0:
            raise ValueError("point mass requires e equal to its atom")
        return Configuration(np.full(n, m.e0, dtype=np.int64))
    tilted = tilt(m, gamma_for_mean(m, e))
    if max_attempts is None:
        max_attempts = int(1000 * math.sqrt(n)) + 1
    tried = 0
    while tried < max_attempts:
        k = min(batch, max_attempts - tried)
        draws = tilted.sample(rng, (k, n))
        hits = np.flatnonzero(draws.sum(axis=1) == total)
        if hits.size:
            return Configuration(draws[hits[0]])
        tried += k
    raise SamplingError(
        f"no sample with total {total} after {tried} attempts (N={n}, e={e}, m={m})"
    )


def microcanonical_marginal(m: BaseMeasure, n: int, total: int) -> np.ndarray:
    """Exact one-particle marginal of ``m^N`` conditioned on the total.

    Dynamic-programming convolution; used as a test oracle for small N, E.
    """
    pm = m.pmf(np.arange(total + 1))
    conv = [np.array([1.0])]
    for _ in range(n - 1):
        conv.append(np.convolve(conv[-1], pm)[: total + 1])
    rest = np.zeros(total + 1)
    rest[: conv[-1].size] = conv[-1]
    joint = np.array([pm[k] * rest[total - k] for k in range(total + 1)])
    return joint / joint.sum()
