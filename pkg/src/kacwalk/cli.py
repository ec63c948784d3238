"""Command-line front end.

Every subcommand reads an optional INI config (``--config``), lets flags
override it, validates the merged settings and writes its outputs into
``--out`` together with a ``run.json`` that echoes the settings, the package
version and the master seed.

Exit codes: 0 success, 2 configuration error, 3 resource cap, 4 numerical
failure (a ``diagnostics.json`` is written to the output directory).
"""
from __future__ import annotations

import argparse
import configparser
import json
import math
import subprocess
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .empirics import empirical_flow, measure_path
from .kinetics import (
    CutoffError,
    KineticPath,
    NumericalError,
    build_bar_path,
    build_bar_path_delta,
    check_prop31,
    energy_identity_residual,
    initial_state,
    reference_flux,
    solve_be,
    solve_mbe,
)
from .ldp import bar_cost_direct, dynamical_cost, total_cost
from .model import Configuration
from .oracle import enumerate_states, generator_matrix
from .sampler import BaseMeasure, SamplingError, sample_microcanonical
from .simulator import simulate_base, simulate_tilted
from .tilt import (
    bar_targets,
    entropy_estimate,
    estimate_rare_probability,
    run_replicas,
)


class ConfigError(ValueError):
    """Invalid or inconsistent settings; message names the field."""


EXIT_OK, EXIT_CONFIG, EXIT_RESOURCE, EXIT_NUMERIC = 0, 2, 3, 4


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# ---------------------------------------------------------------------------
# settings

# name -> (type, default); None default means "required when used"
FIELDS = {
    "m": (str, "point:1"),
    "e": (float, None),
    "n": (int, 1000),
    "T": (float, 1.0),
    "kernel": (str, "base"),
    "t_star": (float, 0.5),
    "delta": (float, 0.1),
    "seed": (int, 0),
    "replicas": (int, 200),
    "n_grid": (str, "50,100,200,400"),
    "delta_grid": (str, ""),
    "workers": (int, None),
    "points": (int, 101),
    "flow_bins": (int, 20),
    "dt": (float, 1e-3),
    "e_cut": (int, None),
    "depth": (int, None),
    "path": (str, "lln"),
    "path_csv": (str, None),
    "flux_csv": (str, None),
    "E": (int, 4),
    "cap": (int, 200_000),
    "flow_rel_tol": (float, 0.1),
    "eta_mean": (float, None),
    "second_functional": (str, "log_merge"),
    "out": (str, "out"),
}


def _convert(name, raw):
    typ = FIELDS[name][0]
    if raw is None:
        return None
    try:
        return typ(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"field {name!r}: cannot read {raw!r} as {typ.__name__}") from None


def load_settings(args) -> dict:
    """Defaults, then config file (all sections flattened), then flags."""
    settings = {k: v for k, (_, v) in FIELDS.items()}
    if getattr(args, "config", None):
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            with open(args.config) as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"config file: {exc}") from None
        for section in cp.sections():
            for key, raw in cp.items(section):
                if key not in FIELDS:
                    raise ConfigError(f"field {key!r} in [{section}]: unknown setting")
                settings[key] = _convert(key, raw)
    for key in FIELDS:
        val = getattr(args, key, None)
        if val is not None:
            settings[key] = _convert(key, val)
    return settings


def _floats(text, name):
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"field {name!r}: expected comma-separated numbers, got {text!r}") from None


def validate(settings: dict, command: str) -> dict:
    s = dict(settings)
    try:
        m = BaseMeasure.parse(s["m"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"field 'm': {exc}") from None
    s["_m"] = m
    if s["e"] is None:
        s["e"] = m.mean()
    if not s["e"] >= 0:
        raise ConfigError("field 'e': must be non-negative")
    if s["n"] < 2:
        raise ConfigError("field 'n': need at least two particles")
    if not s["T"] > 0:
        raise ConfigError("field 'T': must be positive")
    if s["kernel"] not in ("base", "tilted"):
        raise ConfigError("field 'kernel': must be 'base' or 'tilted'")
    needs_tilt = command in ("experiment",) or (command == "simulate" and s["kernel"] == "tilted") \
        or (command == "rate" and s["path"] in ("bar", "bar-delta"))
    if needs_tilt:
        if not 0 < s["t_star"] < s["T"]:
            raise ConfigError("field 't_star': need 0 < t_star < T")
        if command != "rate" or s["path"] == "bar-delta":
            grid = _floats(s["delta_grid"], "delta_grid") if s["delta_grid"] else [s["delta"]]
            for d in grid:
                if not 0 < d < s["t_star"]:
                    raise ConfigError(f"field 'delta': need 0 < delta < t_star, got {d}")
    if s["replicas"] < 1:
        raise ConfigError("field 'replicas': must be positive")
    if s["points"] < 2:
        raise ConfigError("field 'points': need at least two grid points")
    if command == "rate" and s["path"] not in ("lln", "bar", "bar-delta", "csv"):
        raise ConfigError("field 'path': one of lln, bar, bar-delta, csv")
    if command == "rate" and s["path"] == "csv" and not s["path_csv"]:
        raise ConfigError("field 'path_csv': required with --path csv")
    if s["second_functional"] not in ("log_merge", "log_ratio"):
        raise ConfigError("field 'second_functional': log_merge or log_ratio")
    if command == "experiment":
        ns = _floats(s["n_grid"], "n_grid")
        if not ns or any(x < 2 or x != int(x) for x in ns):
            raise ConfigError("field 'n_grid': integers >= 2")
        s["_n_grid"] = [int(x) for x in ns]
    return s


def _echo(s: dict) -> dict:
    return {k: v for k, v in s.items() if not k.startswith("_")}


def _header(s: dict, command: str) -> dict:
    return {"command": command, "version": version_string(), "seed": s["seed"], "config": _echo(s)}


def _outdir(s) -> Path:
    p = Path(s["out"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    return str(x)


def _clean(obj):
    """Replace non-finite floats by strings so the JSON stays standard."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


# ---------------------------------------------------------------------------
# subcommands


def _fit_step(T, cells, dt):
    """Largest step <= dt that divides each of ``cells`` equal output intervals."""
    width = T / cells
    return width / max(1, int(math.ceil(width / dt - 1e-9)))


def cmd_simulate(s: dict) -> dict:
    out = _outdir(s)
    rng = np.random.default_rng(np.random.SeedSequence(s["seed"]))
    cfg = sample_microcanonical(s["_m"], s["n"], s["e"], rng)
    if s["kernel"] == "base":
        log = simulate_base(cfg, s["T"], rng, seed=s["seed"])
    else:
        log = simulate_tilted(cfg, s["T"], s["t_star"], s["delta"], rng, seed=s["seed"])
    header = _header(s, "simulate")
    log.to_jsonl(out / "events.jsonl", extra_header={"version": header["version"], "config": header["config"]})
    grid = np.linspace(0.0, s["T"], s["points"])
    measure_path(log, grid).to_csv(out / "measure.csv")
    empirical_flow(log).to_csv(out / "flow.csv", np.linspace(0.0, s["T"], s["flow_bins"] + 1))
    summary = {"events": len(log), "E": log.e_total}
    if log.log_rn is not None:
        summary.update({"log_rn": log.log_rn, "diag": log.diag})
    _write_json(out / "run.json", _clean({**header, "summary": summary}))
    return summary


def cmd_solve_be(s: dict) -> dict:
    out = _outdir(s)
    f0 = initial_state(s["_m"], s["e"], s["e_cut"])
    grid = np.linspace(0.0, s["T"], s["points"])
    path = solve_be(f0, s["T"], dt=_fit_step(s["T"], s["points"] - 1, s["dt"]), grid=grid)
    path.flux = reference_flux(path, max_in=min(int(path.energies[-1]), 64))
    path.to_csv(out / "path.csv")
    path.flux_to_csv(out / "flux.csv")
    summary = {
        "cutoff": int(path.energies[-1]),
        "mass_plus_leak_error": float(np.max(np.abs(path.mass() + path.leak_mass - 1.0))),
        "energy_plus_leak_error": float(np.max(np.abs(path.energy() + path.leak_energy - s["e"]))),
    }
    _write_json(out / "run.json", _clean({**_header(s, "solve-be"), "summary": summary}))
    return summary


def cmd_solve_mbe(s: dict) -> dict:
    out = _outdir(s)
    f0 = initial_state(s["_m"], s["e"], s["e_cut"])
    grid = np.linspace(0.0, s["T"], s["points"])
    path = solve_mbe(f0, grid, depth=s["depth"])
    path.to_csv(out / "path.csv")
    checks = check_prop31(path)
    summary = {
        "depth": path.info["depth"],
        "cutoff": path.info["cutoff"],
        "leak_energy": float(path.leak_energy[-1]),
        "dyadic_identity_residual": float(np.max(np.abs(energy_identity_residual(path)))),
        "checks": checks,
    }
    _write_json(out / "run.json", _clean({**_header(s, "solve-mbe"), "summary": summary}))
    return summary


def _rate_one(s: dict, kind: str, delta: float | None = None) -> dict:
    m, e, T = s["_m"], s["e"], s["T"]
    if kind == "lln":
        f0 = initial_state(m, e, s["e_cut"])
        cells = min(max(1, int(math.ceil(T / s["dt"]))), 1000)
        grid = np.linspace(0.0, T, cells + 1)
        path = solve_be(f0, T, dt=_fit_step(T, cells, s["dt"]), grid=grid)
        path.flux = reference_flux(path, max_in=min(int(path.energies[-1]), 64))
        pi0 = dict(zip(path.energies.tolist(), path.masses[0].tolist()))
        pi0 = {k: v / sum(pi0.values()) for k, v in pi0.items()}
        res = total_cost(pi0, path, m, e)
        res.diagnostics["note"] = "flux truncated to incoming energies <= 64"
        return res.to_dict()
    if kind == "csv":
        try:
            path = KineticPath.from_csv(s["path_csv"], s["flux_csv"])
        except (OSError, ValueError) as exc:
            raise ConfigError(f"field 'path_csv': {exc}") from None
        pi0 = dict(zip(path.energies.tolist(), path.masses[0].tolist()))
        return total_cost(pi0, path, m, e).to_dict()
    if kind == "bar":
        path = build_bar_path(m, s["t_star"], T, e=e, depth=s["depth"])
        direct = bar_cost_direct(m, s["t_star"], T, e=e)
    else:
        path = build_bar_path_delta(m, s["t_star"], delta, T, e=e)
        direct = bar_cost_direct(m, s["t_star"], T, delta=delta, e=e)
    res = total_cost({int(k): float(v) for k, v in zip(path.energies, path.masses[0]) if v > 0}, path, m, e)
    out = res.to_dict()
    out["diagnostics"]["direct"] = direct
    out["diagnostics"]["relative_gap"] = abs(res.j_dynamic - direct["total"]) / abs(direct["total"])
    if delta is not None:
        out["delta"] = delta
    return out


def cmd_rate(s: dict) -> dict:
    out = _outdir(s)
    if s["path"] == "bar-delta":
        deltas = _floats(s["delta_grid"], "delta_grid") if s["delta_grid"] else [s["delta"]]
        results = [_rate_one(s, "bar-delta", d) for d in deltas]
        values = [r["I"] for r in results]
        order = np.argsort(deltas)[::-1]
        seq = [values[k] for k in order]
        incs = np.diff(seq)
        report = {
            "deltas_descending": [deltas[k] for k in order],
            "I_values": seq,
            "monotone": bool(np.all(incs > 0) or np.all(incs < 0)),
            "increments": incs.tolist(),
        }
        payload = {"results": results, "trend": report}
    else:
        payload = _rate_one(s, s["path"])
    _write_json(out / "rate.json", _clean({**_header(s, "rate"), **payload}))
    return payload


def cmd_oracle(s: dict) -> dict:
    out = _outdir(s)
    space = enumerate_states(s["n"], s["E"], cap=s["cap"])
    gen = generator_matrix(space)
    gen.to_csv(out / "generator.csv")
    summary = {"states": len(space), "nonzero_rates": len(gen.rates)}
    _write_json(out / "run.json", _clean({**_header(s, "oracle"), "summary": summary}))
    return summary


def cmd_experiment(s: dict, self_test: bool = False, dump_replicas: bool = False) -> dict:
    """Tilted replicas over the N-grid, with per-N checkpoints for resuming."""
    out = _outdir(s)
    m, e, T, ts, d = s["_m"], s["e"], s["T"], s["t_star"], s["delta"]
    nbhd = bar_targets(m, ts, d, T, e=e, eta_mean=s["eta_mean"], flow_rel_tol=s["flow_rel_tol"],
                       second=s["second_functional"])
    if self_test:
        I_target = 0.0
    else:
        # the path starts from m_e, so the static cost vanishes
        I_target = float(dynamical_cost(build_bar_path_delta(m, ts, d, T, e=e)))
    echo = _echo(s)
    records = []
    for n in s["_n_grid"]:
        ck = out / f"checkpoint_N{n}.json"
        if ck.exists():
            saved = json.loads(ck.read_text())
            if saved.get("config") == _clean(echo) and saved.get("self_test") == self_test:
                records.append(saved["record"])
                continue
        stats = run_replicas(m, e, n, T, ts, d, s["replicas"], s["seed"], nbhd,
                             workers=s["workers"], self_test=self_test)
        ent = entropy_estimate(stats)
        prob = estimate_rare_probability(stats)
        rec = {
            "N": n,
            "replicas": len(stats),
            "entropy_estimate": ent["entropy"],
            "stderr": ent["stderr"],
            "diag": ent["diag"],
            "hit_rate": prob["hit_rate"],
            "p_hat": prob["p_hat"],
            "log_p_hat": prob["log_p_hat"],
            "log_p_hat_over_N": prob["log_p_hat_over_N"],
            "I_target": I_target,
        }
        if dump_replicas:
            stats.to_jsonl(out / f"replicas_N{n}.jsonl")
        _write_json(ck, _clean({"config": echo, "self_test": self_test, "record": rec}))
        records.append(_clean(rec))
    finite = [(r["N"], r["log_p_hat"]) for r in records if isinstance(r["log_p_hat"], float)]
    slope = float(np.polyfit(*zip(*finite), 1)[0]) if len(finite) >= 2 else math.nan
    summary = {
        "records": records,
        "slope": slope,
        "I_target": I_target,
        "slope_relative_error": abs(slope + I_target) / I_target if I_target else math.nan,
        "neighborhood": nbhd.to_dict(),
        "self_test": self_test,
    }
    _write_json(out / "experiment.json", _clean({**_header(s, "experiment"), **summary}))
    return summary


def cmd_verify(s: dict) -> dict:
    """Quick invariant checks; each line reports pass or fail."""
    from fractions import Fraction

    checks = {}
    space = enumerate_states(3, 4)
    gen = generator_matrix(space)
    checks["generator rows sum to zero"] = all(x == 0 for x in gen.row_sums())
    col = [Fraction(0)] * len(space)
    for (x, y), r in gen.rates.items():
        col[y] += r
    checks["uniform law is stationary"] = all(c == 0 for c in col)
    rng = np.random.default_rng(s["seed"])
    cfg = Configuration(rng.integers(0, 5, 20))
    log = simulate_base(cfg, 2.0, rng)
    checks["energy conserved along a path"] = log.final_configuration().total == cfg.total
    from .kinetics import be_rhs, stationary_geometric

    r, _, _ = be_rhs(stationary_geometric(0.5, 80))
    checks["geometric law is stationary for the kinetic equation"] = float(np.max(np.abs(r[:40]))) < 1e-10
    path = solve_mbe(initial_state(BaseMeasure.parse("point:1")), np.linspace(0, 10, 11))
    checks["dyadic energy identity"] = float(np.max(np.abs(energy_identity_residual(path)))) < 1e-8
    checks["merging-equation bounds"] = bool(check_prop31(path)["bound_i"])
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return {"checks": checks, "ok": all(checks.values())}


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p):
    p.add_argument("--config", help="INI file; flags override its values")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="master seed")


def _add_scenario(p):
    p.add_argument("--m", help="base measure: point:e0, geom:p or finite:w0,w1,...")
    p.add_argument("--e", type=float, help="energy per particle (default: mean of m)")
    p.add_argument("--T", type=float, help="time horizon")
    p.add_argument("--tstar", dest="t_star", type=float, help="evaporation time")
    p.add_argument("--delta", type=float, help="freezing lag before t_star")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kacwalk", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate one path and write the log and its observables")
    _add_common(p)
    _add_scenario(p)
    p.add_argument("--n", type=int, help="number of particles")
    p.add_argument("--kernel", choices=("base", "tilted"))
    p.add_argument("--points", type=int, help="time points of the measure CSV")
    p.add_argument("--flow-bins", dest="flow_bins", type=int, help="time bins of the flow CSV")

    for name, hlp in (("solve-be", "solve the kinetic equation"), ("solve-mbe", "solve the merging equation")):
        p = sub.add_parser(name, help=hlp)
        _add_common(p)
        _add_scenario(p)
        p.add_argument("--points", type=int, help="output time points")
        p.add_argument("--dt", type=float, help="integration step (solve-be)")
        p.add_argument("--ecut", dest="e_cut", type=int, help="energy cutoff of the initial datum")
        p.add_argument("--depth", type=int, help="number of doublings (solve-mbe, default adaptive)")

    p = sub.add_parser("rate", help="evaluate the rate of a path")
    _add_common(p)
    _add_scenario(p)
    p.add_argument("--path", choices=("lln", "bar", "bar-delta", "csv"))
    p.add_argument("--delta-grid", dest="delta_grid", help="comma-separated deltas for bar-delta")
    p.add_argument("--path-csv", dest="path_csv", help="path CSV (t,epsilon,mass)")
    p.add_argument("--flux-csv", dest="flux_csv", help="flux CSV (t,e1,e2,e1p,e2p,density)")
    p.add_argument("--dt", type=float)
    p.add_argument("--ecut", dest="e_cut", type=int)
    p.add_argument("--depth", type=int)

    p = sub.add_parser("oracle", help="write the exact generator for small N and E")
    _add_common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--E", type=int, help="total energy")
    p.add_argument("--cap", type=int, help="largest state space allowed")

    p = sub.add_parser("experiment", help="importance-sampling experiment over an N-grid")
    _add_common(p)
    _add_scenario(p)
    p.add_argument("--n-grid", dest="n_grid", help="comma-separated N values")
    p.add_argument("--replicas", type=int)
    p.add_argument("--workers", type=int, help="worker processes (default: all cores)")
    p.add_argument("--flow-rel-tol", dest="flow_rel_tol", type=float)
    p.add_argument("--eta-mean", dest="eta_mean", type=float)
    p.add_argument("--second-functional", dest="second_functional", choices=("log_merge", "log_ratio"))
    p.add_argument("--self-test", action="store_true", help="simulate the base law instead of the tilted one")
    p.add_argument("--dump-replicas", action="store_true", help="write per-replica JSONL")

    p = sub.add_parser("verify", help="run quick invariant checks")
    _add_common(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    cmd = args.command
    s = None
    try:
        s = validate(load_settings(args), cmd)
        if cmd == "simulate":
            res = cmd_simulate(s)
        elif cmd == "solve-be":
            res = cmd_solve_be(s)
        elif cmd == "solve-mbe":
            res = cmd_solve_mbe(s)
        elif cmd == "rate":
            res = cmd_rate(s)
        elif cmd == "oracle":
            res = cmd_oracle(s)
        elif cmd == "experiment":
            res = cmd_experiment(s, self_test=args.self_test, dump_replicas=args.dump_replicas)
        else:
            res = cmd_verify(s)
            if not res["ok"]:
                return EXIT_NUMERIC
            return EXIT_OK
        print(json.dumps(_clean(res), indent=2, default=_json_default))
        return EXIT_OK
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MemoryError, SamplingError) as exc:
        print(f"resource limit: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except (NumericalError, CutoffError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        if s is not None:
            _write_json(_outdir(s) / "diagnostics.json", {
                "error": str(exc),
                "type": type(exc).__name__,
                "traceback": traceback.format_exc(),
                **_header(s, cmd),
            })
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
