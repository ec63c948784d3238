"""Static cost, dynamical cost and the total rate of a (measure, flux) pair."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson

from .kinetics import KineticPath, solve_mbe, _initial_for_bar
from .model import alpha_inv, kernel_base
from .sampler import BaseMeasure, gamma_for_mean, tilt

__all__ = [
    "InfiniteCost",
    "RateBreakdown",
    "xlogx_cost",
    "pair_loss_matrix",
    "reference_flow_density",
    "static_cost",
    "dynamical_cost",
    "bar_cost_direct",
    "total_cost",
]


class InfiniteCost(float):
    """``+inf`` carrying the reason it is infinite."""

    def __new__(cls, witness: str):
        obj = super().__new__(cls, math.inf)
        obj.witness = witness
        return obj

    def __repr__(self):
        return f"InfiniteCost({self.witness!r})"


def xlogx_cost(r):
    """``r log r - r + 1`` for ``r >= 0``, accurate near 0 and 1."""
    r = np.asarray(r, dtype=float)
    out = np.empty_like(r)
    x = r - 1.0
    near = np.abs(x) < 1e-4
    # series: x^2/2 - x^3/6 + x^4/12
    xs = x[near]
    out[near] = xs * xs * (0.5 - xs / 6.0 + xs * xs / 12.0)
    far = ~near
    rf = r[far]
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(rf > 0, rf * np.log(np.where(rf > 0, rf, 1.0)) - rf + 1.0, 1.0)
    out[far] = val
    return out if out.ndim else float(out)


def pair_loss_matrix(energies) -> np.ndarray:
    """``lam[a, b]``: base rate out of the ordered pair, summed over outcomes."""
    e = np.asarray(energies, dtype=float)
    s = e[:, None] + e[None, :]
    same = np.where(e[:, None] == e[None, :], 1.0, 2.0)
    return (s + 1.0 - same) / (s + 1.0)


def reference_flow_density(pi: dict[int, float]) -> dict[tuple[int, int, int, int], float]:
    """``1/2 pi(e) pi(es) B`` on every ordered quadruple where it is positive."""
    out = {}
    items = [(a, w) for a, w in pi.items() if w]
    for a, wa in items:
        for b, wb in items:
            s = a + b
            for c in range(s + 1):
                rate = kernel_base(a, b, c, s - c)
                if rate:
                    out[(a, b, c, s - c)] = 0.5 * wa * wb * float(rate)
    return out


@dataclass
class RateBreakdown:
    h_static: float
    j_dynamic: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        if math.isinf(self.h_static):
            return self.h_static
        if math.isinf(self.j_dynamic):
            return self.j_dynamic
        return self.h_static + self.j_dynamic

    def to_dict(self) -> dict:
        def enc(x):
            return "inf" if math.isinf(x) else float(x)

        diag = dict(self.diagnostics)
        for name, val in (("H", self.h_static), ("J", self.j_dynamic)):
            if isinstance(val, InfiniteCost):
                diag[f"{name}_witness"] = val.witness
        return {"H": enc(self.h_static), "J": enc(self.j_dynamic), "I": enc(self.total), "diagnostics": diag}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), default=_jsonable, **kw)


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"cannot serialize {type(x)}")


def _as_array(pi) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(pi, dict):
        eps = np.array(sorted(pi), dtype=np.int64)
        return eps, np.array([float(pi[e]) for e in eps.tolist()])
    arr = np.asarray(pi, dtype=float)
    return np.arange(arr.size), arr


def static_cost(pi0, m: BaseMeasure, e: float, energy_tol: float = 1e-9) -> float:
    """Relative entropy to ``m_e`` plus the price of an energy deficit."""
    eps, w = _as_array(pi0)
    if (w < -1e-15).any() or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("pi0 must be a probability vector")
    mean = float(w @ eps)
    if mean > e + energy_tol:
        raise ValueError(f"pi0 has mean {mean} > e = {e}")
    if m.is_point:
        ok = abs(w[eps == m.e0].sum() - 1.0) <= 1e-12 and e == m.e0
        return 0.0 if ok else InfiniteCost("point-mass base: pi0 differs from delta_e")
    g_e = gamma_for_mean(m, e)
    me = tilt(m, g_e).pmf(eps)
    nz = w > 0
    if (me[nz] <= 0).any():
        bad = int(eps[nz][me[nz] <= 0][0])
        return InfiniteCost(f"pi0 not absolutely continuous w.r.t. m_e (energy {bad})")
    ent = float(np.sum(w[nz] * np.log(w[nz] / me[nz])))
    gap = e - mean
    if math.isinf(m.gamma_star):
        if abs(gap) > energy_tol:
            return InfiniteCost(f"gamma_star infinite and energy deficit {gap:.3e}")
        return max(ent, 0.0)
    return max(ent, 0.0) + (m.gamma_star - g_e) * gap


def _level_index(energies, values):
    pos = np.searchsorted(energies, values)
    pos = np.minimum(pos, energies.size - 1)
    present = energies[pos] == values
    return pos, present


def dynamical_cost(path: KineticPath, with_parts: bool = False):
    """Time integral of ``sum dQ^pi [r log r - r + 1]`` with ``r = dQ/dQ^pi``.

    Uses ``sum_q Q^pi (r log r - r + 1) = Q^pi(total) + sum_{Q > 0} (Q log(Q/Q^pi) - Q)``
    at each grid time, then the trapezoid rule on the grid.  A flux charging
    a quad where the reference flux vanishes gives an :class:`InfiniteCost`.
    """
    f = path.masses
    lam = pair_loss_matrix(path.energies)
    ref_total = 0.5 * np.einsum("ka,ab,kb->k", f, lam, f)
    excess = np.zeros(path.grid.size)
    if path.flux is not None and path.flux.quads.size:
        q = path.flux.quads
        a, b, c, d = q.T
        if not np.array_equal(a + b, c + d):
            return InfiniteCost("flux charges a non energy-conserving quad")
        if ((a == c) & (b == d)).any():
            return InfiniteCost("flux charges an identity quad")
        ia, pa = _level_index(path.energies, a)
        ib, pb = _level_index(path.energies, b)
        s = (a + b).astype(float)
        mult = np.where(a == b, 1.0, 2.0) * np.where(c == d, 1.0, 2.0)
        fa = np.where(pa, f[:, ia], 0.0)
        fb = np.where(pb, f[:, ib], 0.0)
        coef = 0.5 * mult / (s + 1.0)
        dens = path.flux.density
        charged = dens > 0
        bad = charged & ((fa <= 0) | (fb <= 0))
        if bad.any():
            k, j = np.argwhere(bad)[0]
            return InfiniteCost(
                f"flux not absolutely continuous: quad {tuple(int(x) for x in q[j])} at t={path.grid[k]:.6g}"
            )
        # logs keep the ratio exact when both masses are tiny
        with np.errstate(divide="ignore", invalid="ignore"):
            log_qpi = np.log(coef) + np.log(np.where(charged, fa, 1.0)) + np.log(np.where(charged, fb, 1.0))
            term = np.where(charged, dens * (np.log(np.where(charged, dens, 1.0)) - log_qpi) - dens, 0.0)
        excess = term.sum(axis=1)
    integrand = ref_total + excess
    J = float(np.trapezoid(integrand, path.grid))
    if with_parts:
        return J, {"integrand": integrand, "reference_total": ref_total, "grid": path.grid}
    return J


def _octave_alpha_grid(alpha_max: float, a0: float, per_octave: int) -> np.ndarray:
    """Piecewise-uniform grid: [0, a0] then octaves [a0 2^k, a0 2^(k+1)],
    each with ``2 * per_octave`` equal intervals (Simpson-ready)."""
    pieces = [np.linspace(0.0, min(a0, alpha_max), 2 * per_octave + 1)]
    lo = a0
    while lo < alpha_max:
        hi = min(2 * lo, alpha_max)
        pieces.append(np.linspace(lo, hi, 2 * per_octave + 1)[1:])
        lo = hi
    return np.concatenate(pieces)


def _simpson_segments(y, x, per_octave):
    seg = 2 * per_octave
    total = 0.0
    start = 0
    while start < x.size - 1:
        stop = min(start + seg, x.size - 1)
        total += simpson(y[start:stop + 1], x=x[start:stop + 1])
        start = stop
    return total


def bar_cost_direct(m: BaseMeasure, t_star: float, T: float, delta: float | None = None,
                    alpha_max: float | None = None, per_octave: int = 32, a0: float | None = None,
                    e: float | None = None, depth: int | None = None, step_frac: float = 0.01) -> dict:
    """Dynamical cost of the evaporating path, evaluated in alpha-time.

    Merging part: ``1/2 int da sum_{e>=1} f_a(e)^2 (2 log(1 + a/t*) + log((1+2e)/2) - 1)``.
    Reference part: ``1/2 int dt sum f f lam`` written as an alpha integral
    with ``dt = da / (1 + a/t*)^2``.  With ``delta`` the path is frozen from
    ``t_star - delta`` and the frozen reference cost over the remaining time
    is added; otherwise the alpha integral is truncated at ``alpha_max`` and
    an upper bound on the neglected tail is reported.
    """
    f0 = _initial_for_bar(m, e)
    if delta is not None:
        if not 0 < delta < t_star < T:
            raise ValueError("need 0 < delta < t_star < T")
        a_end = (t_star - delta) / (1.0 - (t_star - delta) / t_star)
    else:
        a_end = t_star * 2.0 ** 20 if alpha_max is None else alpha_max
    a0 = 0.05 * t_star if a0 is None else a0
    ag = _octave_alpha_grid(a_end, min(a0, a_end), per_octave)
    sol = solve_mbe(f0, ag, depth=depth, step_frac=step_frac)
    f = sol.masses
    eps = sol.energies.astype(float)
    pos = eps >= 1
    weight = np.log((1.0 + 2.0 * eps[pos]) / 2.0) - 1.0
    sq = f[:, pos] ** 2
    merge = 0.5 * (sq.sum(axis=1) * 2.0 * np.log1p(ag / t_star) + sq @ weight)
    lam = pair_loss_matrix(sol.energies)
    ref = 0.5 * np.einsum("ka,ab,kb->k", f, lam, f)
    dt_da = 1.0 / (1.0 + ag / t_star) ** 2
    first = _simpson_segments(merge, ag, per_octave)
    second = _simpson_segments(ref * dt_da, ag, per_octave)
    out = {
        "first_term": first,
        "second_term": second,
        "alpha_end": a_end,
        "depth": sol.info["depth"],
        "grid_points": int(ag.size),
    }
    if delta is not None:
        frozen = (T - (t_star - delta)) * ref[-1]
        out["frozen_term"] = frozen
        out["second_term"] = second + frozen
        out["tail_bound"] = 0.0
    else:
        last = ag >= 0.5 * a_end
        u = 1.0 + ag[last]
        c_est = float(np.max(np.abs(merge[last]) * u ** 1.5 / (1.0 + np.log(u))))
        U = 1.0 + a_end
        tail_first = c_est * 2.0 * U ** -0.5 * (3.0 + math.log(U))
        # reference part after alpha_end: integrand <= ref at the end (decreasing) bounded by 1/2
        t_end = alpha_inv(a_end, t_star)
        tail_second = 0.5 * (t_star - t_end) * max(1.0, float(ref[-1]))
        out["tail_bound"] = tail_first + tail_second
        out["c_estimate"] = c_est
    out["total"] = out["first_term"] + out["second_term"]
    return out


def total_cost(pi0, path: KineticPath, m: BaseMeasure, e: float) -> RateBreakdown:
    h = static_cost(pi0, m, e)
    j = dynamical_cost(path)
    diag = {
        "grid_points": int(path.grid.size),
        "levels": int(path.energies.size),
        "cutoff": int(path.energies[-1]),
        "leak_mass": float(path.leak_mass[-1]),
        "leak_energy": float(path.leak_energy[-1]),
    }
    return RateBreakdown(h, j, diag)
