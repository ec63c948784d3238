"""Deterministic kinetic equations.

* The discrete Boltzmann equation with the uniform kernel, on a dense
  truncated lattice ``0..E_cut``.
* The merging equation (equal energies collide and one particle takes
  everything).  Its right-hand side at level ``e`` only involves ``e`` and
  ``e/2``, so starting from ``f0`` only the levels ``k * 2**j`` with ``k`` in
  the support of ``f0`` are ever populated; the solver works on that sparse
  level set.  Levels without a parent level have the closed form
  ``f0 / (1 + t f0)``.
* The energy-evaporating path obtained by running the merging equation in
  the time ``alpha(t) = t / (1 - t/t_star)``, and its frozen variant.

Truncation never creates mass or energy: whatever would be sent above the
cutoff is accumulated in ``leak_mass`` / ``leak_energy``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .model import alpha, alpha_dot
from .sampler import BaseMeasure, gamma_for_mean, tilt

__all__ = [
    "KineticState",
    "KineticPath",
    "Flux",
    "CutoffError",
    "NumericalError",
    "be_rhs",
    "solve_be",
    "stationary_geometric",
    "initial_state",
    "solve_mbe",
    "mbe_levels",
    "energy_identity_residual",
    "check_prop31",
    "bar_grid",
    "build_bar_path",
    "build_bar_path_delta",
    "reference_flux",
]


class CutoffError(RuntimeError):
    """Truncation level too small for the requested accuracy."""


class NumericalError(RuntimeError):
    """Integrator produced an invalid state (e.g. negative mass)."""


@dataclass
class KineticState:
    energies: np.ndarray
    masses: np.ndarray
    leak_mass: float = 0.0
    leak_energy: float = 0.0

    @property
    def e_cut(self) -> int:
        return int(self.energies[-1])

    def mass(self) -> float:
        return float(self.masses.sum())

    def energy(self) -> float:
        return float(self.masses @ self.energies.astype(float))

    def dense(self, width: int | None = None) -> np.ndarray:
        width = self.e_cut + 1 if width is None else width
        out = np.zeros(width)
        keep = self.energies < width
        out[self.energies[keep]] = self.masses[keep]
        return out


@dataclass
class Flux:
    """Flux density on canonical quads: ``density[k, q]`` at grid time ``k``.

    ``quads[q] = (a, b, c, d)`` with ``a <= b`` and ``c <= d``; the density
    is summed over the ordered quadruples the canonical quad represents.
    """

    quads: np.ndarray
    density: np.ndarray


@dataclass
class KineticPath:
    grid: np.ndarray
    energies: np.ndarray
    masses: np.ndarray  # (len(grid), len(energies))
    leak_mass: np.ndarray
    leak_energy: np.ndarray
    flux: Flux | None = None
    info: dict = field(default_factory=dict)

    def state(self, k: int) -> KineticState:
        return KineticState(self.energies, self.masses[k], float(self.leak_mass[k]), float(self.leak_energy[k]))

    def mass(self) -> np.ndarray:
        return self.masses.sum(axis=1)

    def energy(self) -> np.ndarray:
        return self.masses @ self.energies.astype(float)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("t,epsilon,mass\n")
            for t, row in zip(self.grid.tolist(), self.masses):
                for k in np.flatnonzero(row):
                    fh.write(f"{t!r},{int(self.energies[k])},{float(row[k])!r}\n")

    @classmethod
    def from_csv(cls, path, flux_path=None) -> "KineticPath":
        """Read the CSV written by :meth:`to_csv` (and optionally the flux CSV)."""
        rows = _read_csv(path, ("t", "epsilon", "mass"))
        t = np.array([float(r[0]) for r in rows])
        eps = np.array([int(r[1]) for r in rows], dtype=np.int64)
        mass = np.array([float(r[2]) for r in rows])
        grid = np.unique(t)
        energies = np.unique(eps)
        masses = np.zeros((grid.size, energies.size))
        masses[np.searchsorted(grid, t), np.searchsorted(energies, eps)] = mass
        flux = None
        if flux_path is not None:
            frows = _read_csv(flux_path, ("t", "e1", "e2", "e1p", "e2p", "density"))
            keys = sorted({tuple(sorted(map(int, r[1:3]))) + tuple(sorted(map(int, r[3:5]))) for r in frows})
            col = {k: n for n, k in enumerate(keys)}
            dens = np.zeros((grid.size, len(keys)))
            for r in frows:
                k = tuple(sorted(map(int, r[1:3]))) + tuple(sorted(map(int, r[3:5])))
                row = np.searchsorted(grid, float(r[0]))
                if row >= grid.size or grid[row] != float(r[0]):
                    raise ValueError(f"{flux_path}: flux time {r[0]} not on the path grid")
                dens[row, col[k]] += float(r[5])
            flux = Flux(np.array(keys, dtype=np.int64).reshape(-1, 4), dens)
        zeros = np.zeros(grid.size)
        return cls(grid, energies, masses, zeros, zeros.copy(), flux, {"source": str(path)})

    def flux_to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("t,e1,e2,e1p,e2p,density\n")
            if self.flux is None:
                return
            for t, row in zip(self.grid.tolist(), self.flux.density):
                for q in np.flatnonzero(row):
                    a, b, c, d = (int(x) for x in self.flux.quads[q])
                    fh.write(f"{t!r},{a},{b},{c},{d},{float(row[q])!r}\n")


def _read_csv(path, header):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(x.strip() for x in rows[0]) != header:
        raise ValueError(f"{path}: expected header {','.join(header)}")
    body = rows[1:]
    for n, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise ValueError(f"{path}:{n}: expected {len(header)} fields, got {len(r)}")
    return body


# ---------------------------------------------------------------------------
# Boltzmann equation with the uniform kernel


def be_rhs(f: KineticState) -> tuple[np.ndarray, float, float]:
    """Time derivative of ``f`` plus leak rates of mass and energy.

    With ``c(S) = sum_{a+b=S} f(a) f(b)`` the gain at ``e`` is
    ``sum_{S >= e} c(S)/(S+1)`` and the loss is ``f(e) * sum f``.  Gains
    above the cutoff are returned as leak rates.
    """
    x = np.asarray(f.masses, dtype=float)
    return _be_rhs_dense(x)


def _be_rhs_dense(x):
    cut = x.size - 1
    c = np.convolve(x, x)
    s = np.arange(c.size)
    w = c / (s + 1)
    gain = np.cumsum(w[::-1])[::-1]
    rhs = gain[: cut + 1] - x * x.sum()
    over = gain[cut + 1:]
    return rhs, float(over.sum()), float(over @ s[cut + 1:])


def stationary_geometric(p: float, e_cut: int) -> KineticState:
    """``p (1-p)^e`` restricted to ``0..e_cut`` (not renormalized)."""
    eps = np.arange(e_cut + 1)
    return KineticState(eps, p * (1 - p) ** eps)


def initial_state(m: BaseMeasure, e: float | None = None, e_cut: int | None = None, tail: float = 1e-16) -> KineticState:
    """Dense initial datum ``m_e`` (``m`` tilted to mean ``e``) on ``0..e_cut``.

    Mass beyond the cutoff is booked as leak.
    """
    if e is None:
        e = m.mean()
    tm = tilt(m, gamma_for_mean(m, e))
    if e_cut is None:
        if m.family == "point":
            e_cut = 4 * m.e0
        elif m.family == "finite":
            e_cut = 4 * len(m.weights)
        else:
            r = tm._ratio
            e_cut = max(8, int(math.ceil(math.log(tail) / math.log(r))))
    eps = np.arange(e_cut + 1)
    pm = tm.pmf(eps)
    lost = max(0.0, 1.0 - pm.sum())
    lost_e = max(0.0, tm.mean() - pm @ eps)
    return KineticState(eps, pm, lost, lost_e)


def solve_be(f0: KineticState, T: float, dt: float = 1e-3, grid=None) -> KineticPath:
    """Fixed-step RK4 for the Boltzmann equation on the lattice of ``f0``.

    Mass and energy sent above the cutoff are integrated as extra state, so
    ``mass + leak_mass`` is preserved to rounding.  ``grid`` gives output
    times (default: every step).
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not np.array_equal(f0.energies, np.arange(f0.energies.size)):
        raise ValueError("solve_be needs a dense lattice 0..E_cut")
    nsteps = max(1, int(math.ceil(T / dt - 1e-9)))
    h = T / nsteps
    if grid is None:
        grid = np.linspace(0.0, T, nsteps + 1)
    grid = np.asarray(grid, dtype=float)
    out_steps = np.rint(grid / h).astype(int)
    if np.abs(out_steps * h - grid).max(initial=0) > 1e-9 * max(1.0, T):
        raise ValueError("output grid must be a subset of the step grid")

    def rhs(y):
        r, lm, le = _be_rhs_dense(y[:-2])
        return np.concatenate([r, [lm, le]])

    y = np.concatenate([f0.masses.astype(float), [f0.leak_mass, f0.leak_energy]])
    rows = []
    want = dict()
    for k, s in enumerate(out_steps):
        want.setdefault(int(s), []).append(k)
    store = [None] * grid.size
    for k in want.get(0, []):
        store[k] = y.copy()
    for step in range(1, nsteps + 1):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * h * k1)
        k3 = rhs(y + 0.5 * h * k2)
        k4 = rhs(y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if y[:-2].min() < -1e-12:
            raise NumericalError(f"negative mass {y[:-2].min():.3e} at t={step * h:.6g}; reduce dt")
        for k in want.get(step, []):
            store[k] = y.copy()
    rows = np.array(store)
    return KineticPath(
        grid=grid,
        energies=f0.energies.copy(),
        masses=rows[:, :-2],
        leak_mass=rows[:, -2],
        leak_energy=rows[:, -1],
        info={"solver": "be-rk4", "dt": h},
    )


# ---------------------------------------------------------------------------
# merging equation on dyadic levels


def mbe_levels(support, depth: int) -> tuple[np.ndarray, int]:
    """Levels ``{0} U {k 2^j <= cutoff}`` with ``cutoff = max(support) 2^depth``."""
    support = sorted(int(k) for k in support if k >= 1)
    if not support:
        return np.array([0], dtype=np.int64), 0
    if depth < 0 or support[-1].bit_length() + depth > 62:
        raise CutoffError(f"cannot represent cutoff {support[-1]} * 2^{depth} in 64 bits")
    cutoff = support[-1] << depth
    levels = {0}
    for k in support:
        x = k
        while x <= cutoff:
            levels.add(x)
            x <<= 1
    return np.array(sorted(levels), dtype=np.int64), cutoff


class _MergeSystem:
    def __init__(self, energies, f0):
        self.energies = energies
        index = {int(x): k for k, x in enumerate(energies)}
        n = energies.size
        parent = np.full(n, -1)
        child = np.full(n, -1)
        for k, x in enumerate(energies.tolist()):
            if x >= 1 and x % 2 == 0 and (x // 2) in index:
                parent[k] = index[x // 2]
            if x >= 1 and 2 * x in index:
                child[k] = index[2 * x]
        self.positive = energies >= 1
        # levels whose gain is nonzero need integration; others are closed form
        self.free = self.positive & (parent < 0)
        self.driven = parent >= 0
        self.parent = parent
        self.leaks = self.positive & (child < 0)
        self.f0 = np.asarray(f0, dtype=float)
        self.ef = energies.astype(float)

    def closed(self, t):
        f0 = self.f0[self.free]
        return f0 / (1.0 + t * f0)

    def assemble(self, t, y_driven, f0_level):
        f = np.zeros(self.energies.size)
        f[0] = f0_level
        f[self.free] = self.closed(t)
        f[self.driven] = y_driven
        return f

    def rhs(self, t, y):
        # y = [f(0), f(driven levels), G per level (int of e f^2), leak mass, leak energy]
        nd = int(self.driven.sum())
        f = self.assemble(t, y[1:1 + nd], y[0])
        sq = f * f
        pos = self.positive
        d0 = 0.5 * sq[pos].sum()
        dd = 0.5 * sq[self.parent[self.driven]] - sq[self.driven]
        dg = self.ef * sq
        dlm = 0.5 * sq[self.leaks].sum()
        dle = (self.ef[self.leaks] * sq[self.leaks]).sum()
        return np.concatenate([[d0], dd, dg, [dlm, dle]])


def _mbe_integrate(energies, f0, times, step_frac):
    sysm = _MergeSystem(energies, f0)
    nd = int(sysm.driven.sum())
    nl = energies.size
    y = np.concatenate([[f0[0]], f0[sysm.driven], np.zeros(nl), [0.0, 0.0]])
    out_f = np.zeros((len(times), nl))
    out_g = np.zeros((len(times), nl))
    out_leak = np.zeros((len(times), 2))
    order = np.argsort(times, kind="stable")
    t = 0.0
    for k in order:
        target = float(times[k])
        if target < t:
            raise ValueError("output times must be non-negative")
        while t < target:
            h = min(step_frac * (1.0 + t), target - t)
            k1 = sysm.rhs(t, y)
            k2 = sysm.rhs(t + 0.5 * h, y + 0.5 * h * k1)
            k3 = sysm.rhs(t + 0.5 * h, y + 0.5 * h * k2)
            k4 = sysm.rhs(t + h, y + h * k3)
            y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            t = t + h if target - (t + h) > 1e-14 * (1 + target) else target
        out_f[k] = sysm.assemble(t, y[1:1 + nd], y[0])
        out_g[k] = y[1 + nd:1 + nd + nl]
        out_leak[k] = y[-2:]
    if out_f.min() < -1e-12:
        raise NumericalError("negative mass in merging-equation solution")
    return out_f, out_g, out_leak


def solve_mbe(
    f0: KineticState,
    times,
    depth: int | None = None,
    energy_tol: float = 1e-6,
    step_frac: float = 0.01,
    max_depth: int = 56,
) -> KineticPath:
    """Solve the merging equation at the requested output times.

    ``depth`` fixes the cutoff ``max(support) * 2**depth``; by default it is
    chosen adaptively, growing until the leaked energy at the last time is
    below ``energy_tol``.
    """
    times = np.asarray(times, dtype=float)
    if times.size == 0 or times.min() < 0:
        raise ValueError("need non-negative output times")
    support = f0.energies[(f0.masses > 0) & (f0.energies >= 1)]
    adaptive = depth is None
    if adaptive:
        tmax = float(times.max())
        depth = max(4, int(math.ceil(math.log2(2.0 + tmax))) + 4)
        if depth > max_depth:
            raise CutoffError(f"horizon {tmax:g} needs depth >= {depth} > {max_depth}")
    while True:
        energies, cutoff = mbe_levels(support, depth)
        start = np.zeros(energies.size)
        pos = np.searchsorted(energies, f0.energies)
        ok = (pos < energies.size)
        ok[ok] &= energies[pos[ok]] == f0.energies[ok]
        start[pos[ok]] = f0.masses[ok]
        fs, gs, leak = _mbe_integrate(energies, start, times, step_frac)
        if not adaptive or leak[:, 1].max() < energy_tol:
            break
        if depth + 4 > max_depth:
            raise CutoffError(
                f"leaked energy {leak[:, 1].max():.3e} >= {energy_tol} at depth {depth}; "
                f"need depth > {max_depth} (cutoff above {cutoff})"
            )
        depth += 4
    return KineticPath(
        grid=times,
        energies=energies,
        masses=fs,
        leak_mass=leak[:, 0] + f0.leak_mass,
        leak_energy=leak[:, 1] + f0.leak_energy,
        info={"solver": "mbe", "depth": depth, "cutoff": cutoff, "step_frac": step_frac, "G": gs},
    )


def energy_identity_residual(path: KineticPath) -> np.ndarray:
    """Residuals of the dyadic-block energy identity, shape (len(grid), blocks).

    For each ``n``: ``sum_{e <= 2^n} e f_t(e) - sum_{e <= 2^n} e f_0(e)
    + int_0^t sum_{2^(n-1) < e <= 2^n} e f_s(e)^2 ds``.
    Requires the path to start at t = 0.
    """
    if path.grid[0] != 0:
        raise ValueError("path must start at t = 0")
    G = path.info["G"]
    ef = path.energies.astype(float)
    cutoff = int(path.energies[-1])
    nmax = max(1, int(cutoff).bit_length())
    res = np.zeros((path.grid.size, nmax))
    for n in range(1, nmax + 1):
        upto = path.energies <= (1 << n)
        block = (path.energies > (1 << (n - 1))) & upto
        lhs = path.masses[:, upto] @ ef[upto]
        res[:, n - 1] = lhs - lhs[0] + G[:, block].sum(axis=1)
    return res


def check_prop31(path: KineticPath) -> dict:
    """Grid checks of the decay bounds for a merging-equation path."""
    t = path.grid
    pos = path.energies >= 1
    f = path.masses[:, pos]
    e = path.energies[pos].astype(float)
    xi = (1.0 + t)[:, None] * f
    mass_pos = f.sum(axis=1)
    logmass = f @ np.log(e)
    c2 = mass_pos * np.sqrt(1.0 + t)
    c3 = logmass * np.sqrt(1.0 + t) / (1.0 + np.log1p(t))
    half = t <= 0.5 * t.max()
    f0_series = path.masses[:, path.energies == 0][:, 0]
    return {
        "bound_i": bool((f <= 2.0 / (1.0 + t)[:, None] + 1e-14).all()),
        "max_xi": float(xi.max(initial=0.0)),
        "c_ii": float(c2.max()),
        "c_iii": float(c3.max()),
        "c_ii_first_half": float(c2[half].max()),
        "c_iii_first_half": float(c3[half].max()),
        "c_stabilizes": bool(c2.max() <= c2[half].max() * (1 + 1e-9) and c3.max() <= c3[half].max() * (1 + 1e-9)),
        "f0_nondecreasing": bool((np.diff(f0_series[np.argsort(t)]) >= -1e-14).all()),
    }


# ---------------------------------------------------------------------------
# energy-evaporating path


def bar_grid(t_star: float, T: float, t_end: float | None = None, n_uniform: int = 200,
             per_octave: int = 32, alpha_max: float | None = None) -> np.ndarray:
    """Time grid for the evaporating path on [0, t_end) (default ``t_star``).

    Uniform points plus the preimages of a geometric alpha-grid, so the
    region just before ``t_star`` (where alpha blows up) is resolved.
    """
    if t_end is None:
        t_end = t_star
        if alpha_max is None:
            alpha_max = t_star * 2.0 ** 20
    else:
        alpha_max = alpha(t_end, t_star)
    ts = np.linspace(0.0, t_end, n_uniform + 1)
    a0 = min(0.05 * t_star, alpha_max)
    octaves = max(1.0, math.log2(alpha_max / a0))
    alphas = a0 * 2.0 ** np.linspace(0.0, octaves, int(math.ceil(octaves * per_octave)) + 1)
    alphas = alphas[alphas <= alpha_max * (1 + 1e-12)]
    tg = alphas / (1.0 + alphas / t_star)
    grid = np.unique(np.concatenate([ts, tg]))
    if t_end == t_star:
        grid = grid[grid < t_star]
    else:
        grid = grid[grid <= t_end]
    return grid


def _initial_for_bar(m: BaseMeasure, e: float | None, tail: float = 1e-16) -> KineticState:
    mean = m.mean()
    if e is not None and abs(mean - e) > 1e-12 * max(1.0, e):
        raise ValueError(f"base measure has mean {mean}, not {e}")
    return initial_state(m, mean, tail=tail)


def _merge_flux(energies, masses, rate):
    """Canonical merging flux (e, e) -> (0, 2e): density f(e)^2 * rate / 2."""
    pos = np.flatnonzero(energies >= 1)
    quads = np.stack([energies[pos], energies[pos], np.zeros(pos.size, dtype=np.int64), 2 * energies[pos]], axis=1)
    dens = 0.5 * masses[:, pos] ** 2 * np.asarray(rate)[:, None]
    return quads, dens


def build_bar_path(m: BaseMeasure, t_star: float, T: float, grid=None, e: float | None = None,
                   depth: int | None = None, step_frac: float = 0.01, energy_tol: float = 1e-6) -> KineticPath:
    """Evaporating path: merging equation run in alpha-time up to ``t_star``,
    then all mass at zero energy, with its flux."""
    if not 0 < t_star < T:
        raise ValueError("need 0 < t_star < T")
    f0 = _initial_for_bar(m, e)
    grid = bar_grid(t_star, T) if grid is None else np.asarray(grid, dtype=float)
    before = grid[grid < t_star]
    after = np.unique(np.concatenate([[t_star], grid[grid >= t_star], [T]]))
    alphas = np.array([alpha(t, t_star) for t in before])
    sol = solve_mbe(f0, alphas, depth=depth, step_frac=step_frac, energy_tol=energy_tol)
    nl = sol.energies.size
    tail_masses = np.zeros((after.size, nl))
    tail_masses[:, 0] = 1.0
    rate = np.array([alpha_dot(t, t_star) for t in before])
    q_before, d_before = _merge_flux(sol.energies, sol.masses, rate)
    density = np.vstack([d_before, np.zeros((after.size, q_before.shape[0]))])
    info = dict(sol.info)
    info.update({"t_star": t_star, "T": T, "alpha": alphas, "kind": "bar", "m": str(m)})
    return KineticPath(
        grid=np.concatenate([before, after]),
        energies=sol.energies,
        masses=np.vstack([sol.masses, tail_masses]),
        leak_mass=np.concatenate([sol.leak_mass, np.full(after.size, sol.leak_mass[-1])]),
        leak_energy=np.concatenate([sol.leak_energy, np.full(after.size, sol.leak_energy[-1])]),
        flux=Flux(q_before, density),
        info=info,
    )


def build_bar_path_delta(m: BaseMeasure, t_star: float, delta: float, T: float, grid=None,
                         e: float | None = None, n_after: int = 50, **kw) -> KineticPath:
    """Evaporating path frozen from ``t_star - delta`` on, flux switched off.

    The grid holds ``t_star - delta`` twice: first with the left limit of the
    flux, then with zero flux.
    """
    if not 0 < delta < t_star < T:
        raise ValueError("need 0 < delta < t_star < T")
    f0 = _initial_for_bar(m, e)
    cut = t_star - delta
    if grid is None:
        grid = bar_grid(t_star, T, t_end=cut)
    grid = np.asarray(grid, dtype=float)
    before = np.unique(np.concatenate([grid[grid < cut], [0.0]]))
    after = np.unique(np.concatenate([np.linspace(cut, T, n_after + 1), grid[grid >= cut]]))
    alphas = np.array([alpha(t, t_star) for t in np.concatenate([before, [cut]])])
    sol = solve_mbe(f0, alphas, **kw)
    frozen = sol.masses[-1]
    masses = np.vstack([sol.masses, np.tile(frozen, (after.size, 1))])
    rate = np.array([alpha_dot(t, t_star) for t in np.concatenate([before, [cut]])])
    quads, dens = _merge_flux(sol.energies, sol.masses, rate)
    density = np.vstack([dens, np.zeros((after.size, quads.shape[0]))])
    nb = before.size + 1
    info = dict(sol.info)
    info.update({"t_star": t_star, "delta": delta, "T": T, "alpha": alphas, "kind": "bar-delta", "m": str(m)})
    return KineticPath(
        grid=np.concatenate([before, [cut], after]),
        energies=sol.energies,
        masses=masses,
        leak_mass=np.concatenate([sol.leak_mass, np.full(after.size, sol.leak_mass[-1])]),
        leak_energy=np.concatenate([sol.leak_energy, np.full(after.size, sol.leak_energy[-1])]),
        flux=Flux(quads, density),
        info=info,
    )


def reference_flux(path: KineticPath, max_in: int | None = None) -> Flux:
    """The flux ``1/2 f f B`` of a path, on all canonical quads with
    incoming energies among the path's levels (up to ``max_in``)."""
    levels = path.energies if max_in is None else path.energies[path.energies <= max_in]
    idx = np.searchsorted(path.energies, levels)
    quads = []
    cols = []
    coef = []
    for x, a in enumerate(levels.tolist()):
        for y in range(x, levels.size):
            b = int(levels[y])
            s = a + b
            for c in range(0, s // 2 + 1):
                d = s - c
                if (c, d) == (a, b):
                    continue
                mult = (1 if a == b else 2) * (1 if c == d else 2)
                quads.append((a, b, c, d))
                cols.append((idx[x], idx[y]))
                coef.append(0.5 * mult / (s + 1))
    quads = np.array(quads, dtype=np.int64).reshape(-1, 4)
    cols = np.array(cols, dtype=np.int64).reshape(-1, 2)
    dens = path.masses[:, cols[:, 0]] * path.masses[:, cols[:, 1]] * np.array(coef)[None, :]
    return Flux(quads, dens)
