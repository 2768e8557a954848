"""Command-line entry point: ``transmute <subcommand> ...``.

Models are given as a config file path or as ``builtin:NAME`` with
``--param key=value`` overrides. Output paths that are relative resolve
against ``$TRANSMUTE_OUTPUT_DIR`` when it is set.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .dirichlet import GridError, MaximumPrincipleError, SolveConfig, limit_sweep, solve_dirichlet
from .experiment import (
    OUTPUT_ENV,
    ConfigError,
    RunManifest,
    emit_tables,
    exits_columns,
    format_float,
    load_experiment,
    read_table,
    run_experiment,
    verify_prop2,
    write_table,
)
from .ldp import PathDiscretization, action_I, action_S, action_S_timed, invariant_suite
from .model import ModelConfigError, ModelSpec, builtin_model, load_model, validate_model
from .quasipotential import (
    boundary_samples,
    check_assumptions,
    default_T_grid,
    find_exit_minimizer,
)
from .simulate import SimConfig, rate_schedule, simulate_batch, simulate_until_exit
from .switching import integrate_averaged

log = logging.getLogger("transmute")


class CLIError(Exception):
    pass


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _model(args) -> ModelSpec:
    src = args.model
    params = {}
    for item in args.param or []:
        if "=" not in item:
            raise CLIError(f"--param expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        params[k.strip()] = _parse_value(v.strip())
    if src.startswith("builtin:"):
        return builtin_model(src.split(":", 1)[1], params)
    if params:
        raise CLIError("--param only applies to builtin models")
    return load_model(src)


def _out_path(path: str) -> Path:
    p = Path(path)
    base = os.environ.get(OUTPUT_ENV)
    if base and not p.is_absolute():
        p = Path(base) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _out_dir(path: str) -> Path:
    p = Path(path)
    base = os.environ.get(OUTPUT_ENV)
    if base and not p.is_absolute():
        p = Path(base) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _emit(data, out: Optional[str]):
    text = json.dumps(data, indent=2, sort_keys=True, default=_default)
    if out:
        _out_path(out).write_text(text + "\n")
    else:
        print(text)


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o).__name__)


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def _deltahat(args) -> float:
    return args.eps ** 2 if args.deltahat is None else args.deltahat


def _add_model(p: argparse.ArgumentParser):
    p.add_argument("--model", required=True, help="config file or builtin:NAME")
    p.add_argument("--param", action="append", metavar="KEY=VALUE",
                   help="builtin model parameter (repeatable)")


def _add_eps(p: argparse.ArgumentParser, eps_required: bool = True):
    p.add_argument("--eps", type=float, required=eps_required)
    p.add_argument("--deltahat", type=float, default=None, help="slow-block noise (default eps^2)")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_validate(args) -> int:
    spec = _model(args)
    rep = validate_model(spec, args.samples, args.seed)
    _emit(rep.to_dict(), None)
    return 0 if rep.ok else 1


def cmd_averaged_flow(args) -> int:
    spec = _model(args)
    z0 = _floats(args.z0)
    path = integrate_averaged(spec, z0, args.T, args.dt)
    cols = ["t"] + [f"z{i + 1}" for i in range(spec.d)]
    rows = [[t, *z] for t, z in zip(path.times, path.positions)]
    write_table(_out_path(args.out), cols, rows)
    return 0


def _sim_config(args, spec: ModelSpec, trials: int) -> SimConfig:
    rates = rate_schedule(spec, json.loads(args.rates)) if getattr(args, "rates", None) else None
    return SimConfig(eps=args.eps, deltahat=_deltahat(args),
                     dt=args.dt if args.dt is not None else args.eps / 20,
                     t_max=args.tmax, seed=args.seed, trials=trials, shards=args.workers,
                     workers=args.workers, rates=rates)


def cmd_simulate(args) -> int:
    spec = _model(args)
    z0 = _floats(args.z0) if args.z0 else spec.box.mean(axis=1).tolist()
    if len(z0) != spec.d:
        raise CLIError(f"--z0 needs {spec.d} numbers")
    k0 = args.mode - 1
    if not 0 <= k0 < spec.K:
        raise CLIError(f"--mode must be in 1..{spec.K}")
    cfg = _sim_config(args, spec, args.trials)
    out = _out_dir(args.out)
    stats = simulate_batch(spec, cfg, z0, k0)
    rows = []
    for i in range(stats.trials):
        row = [stats.tau[i], *stats.z[i], int(stats.mode[i]) + 1, *stats.r[i]]
        if args.with_status:
            row += [int(stats.censored[i]), float(stats.weights[i])]
        rows.append(row)
    cols = exits_columns(spec.d, spec.K) + (["censored", "weight"] if args.with_status else [])
    write_table(out / "exits.csv", cols, rows)
    if args.paths:
        prow = []
        for trial in range(min(args.paths, cfg.trials)):
            traj, _ = simulate_until_exit(z0, k0, spec, cfg, trial=trial)
            for t, z, m in zip(traj.times, traj.positions, traj.modes):
                prow.append([trial, t, *z, int(m) + 1])
        write_table(out / "paths.csv", ["trial", "t"] + [f"z{i + 1}" for i in range(spec.d)] + ["mode"], prow)
    print(json.dumps({"trials": stats.trials, "exited": stats.n_exited,
                      "censored": int(stats.censored.sum())}))
    return 0


def cmd_exit_stats(args) -> int:
    cols, data = read_table(Path(args.exits))
    d = cols.index("mode") - 1
    K = sum(1 for c in cols if c[:1] == "r" and c[1:].isdigit())
    tau, z, mode, r = data[:, 0], data[:, 1:1 + d], data[:, 1 + d].astype(int), data[:, 2 + d:2 + d + K]
    keep = np.ones(len(data), dtype=bool)
    if "censored" in cols:
        keep = data[:, cols.index("censored")] == 0
    n = int(keep.sum())
    out = {"rows": int(len(data)), "exited": n}
    if n:
        pos = tau[keep] > 0
        occ = (r[keep][pos] / tau[keep][pos, None]).mean(axis=0) if pos.any() else np.full(K, math.nan)
        out.update({
            "mean_tau": float(tau[keep].mean()),
            "mean_occupation": occ.tolist(),
            "mode_probs": [float((mode[keep] == k + 1).mean()) for k in range(K)],
            "mean_exit_point": z[keep].mean(axis=0).tolist(),
        })
        if args.z_bar:
            zb = np.asarray(_floats(args.z_bar))
            dist = np.linalg.norm(z[keep] - zb, axis=1)
            out["prob_far"] = {format_float(dl): float((dist > dl).mean()) for dl in args.delta}
    _emit(out, args.out)
    return 0


def cmd_ldp_verify(args) -> int:
    spec = _model(args)
    rep = invariant_suite(spec, args.eps, _deltahat(args), args.samples, args.seed)
    _emit(rep, args.out)
    return 0 if rep["passed"] else 1


def cmd_action(args) -> int:
    spec = _model(args)
    cols, data = read_table(Path(args.path))
    d, K = spec.d, spec.K
    zc = [f"z{i + 1}" for i in range(d)]
    mc = [f"mu{k + 1}" for k in range(K)]
    if cols[0] != "t" or any(c not in cols for c in zc):
        raise CLIError("path CSV needs columns t, z1..zd[, mu1..muK]")
    idx = {c: i for i, c in enumerate(cols)}
    mu = data[:, [idx[c] for c in mc]] if all(c in idx for c in mc) else None
    path = PathDiscretization(data[:, 0], data[:, [idx[c] for c in zc]], mu)
    dh = _deltahat(args)
    if args.mode == "I":
        val = action_I(spec, path, args.eps, dh)
    elif args.mode == "S":
        val = action_S(spec, path, args.eps, dh)
    else:
        if not args.rates:
            raise CLIError("--mode timed needs --rates")
        val = action_S_timed(spec, path, rate_schedule(spec, json.loads(args.rates)), args.eps, dh)
    _emit({"mode": args.mode, "value": val.value if val.finite else "inf",
           "finite": val.finite, "converged": val.converged,
           "segments": [float(x) for x in val.segments]}, args.out)
    return 0


def cmd_quasipotential(args) -> int:
    spec = _model(args)
    dh = _deltahat(args)
    z_start = _floats(args.z_start) if args.z_start else None
    samples = boundary_samples(spec, args.boundary_samples, z_start)
    interior = np.vstack([spec.box.mean(axis=1), 0.5 * samples + 0.5 * spec.box.mean(axis=1)])
    report = check_assumptions(spec, samples, interior)
    if z_start is None and report.unique_stationary:
        z_start = report.stationary[0]
    if args.Tgrid:
        T_grid = _floats(args.Tgrid)
    else:
        T_grid = default_T_grid(spec, z_start if report.unique_stationary else None).tolist()
    profile = find_exit_minimizer(spec, args.eps, dh, samples, T_grid, args.N, z_start=z_start,
                                  seed=args.seed, starts=args.starts)
    _emit({"profile": profile.to_dict(), "assumptions": report.to_dict(), "T_grid": T_grid,
           "eps": args.eps, "deltahat": dh}, args.out)
    return 0


def cmd_dirichlet(args) -> int:
    spec = _model(args)
    cfg = SolveConfig(args.eps, args.deltahat, args.h, args.tol, method=args.method,
                      scheme=args.scheme)
    fld = solve_dirichlet(spec, cfg)
    pts = fld.grid.points
    vals = fld.values.reshape(spec.K, -1)
    keep = ~np.isnan(vals[0])
    kinds = fld.grid.kind.ravel()
    cols = [f"z{i + 1}" for i in range(spec.d)] + ["kind"] + [f"u{k + 1}" for k in range(spec.K)]
    rows = [[*pts[i], int(kinds[i]), *vals[:, i]] for i in np.flatnonzero(keep)]
    write_table(_out_path(args.out), cols, rows)
    print(json.dumps({"residual": fld.residual, "nodes": int(keep.sum()),
                      "min": float(np.nanmin(vals)), "max": float(np.nanmax(vals))}))
    return 0


def cmd_dirichlet_sweep(args) -> int:
    spec = _model(args)
    eps_list = _floats(args.eps_list)
    probe = _floats(args.probe)
    expected = args.expected
    if expected is None and args.profile:
        data = json.loads(Path(args.profile).read_text())
        prof = data.get("profile", data)
        expected = float(spec.boundary_value(np.asarray(prof["z_bar"], float), int(prof["k0"]) - 1))
    base = SolveConfig(eps_list[0], args.deltahat, args.h, args.tol, method=args.method,
                       scheme=args.scheme)
    rows = limit_sweep(spec, base, eps_list, probe, expected, args.cells_per_eps)
    out = {"probe": probe, "expected": expected, "rows": [r.to_dict() for r in rows]}
    if expected is not None and len(rows) >= 3:
        tail = np.array([r.deviations for r in rows[-3:]])
        out["tail_non_increasing"] = [bool(np.all(np.diff(tail[:, k]) <= 0)) for k in range(spec.K)]
    _emit(out, args.out)
    return 0


def cmd_run(args) -> int:
    cfg = load_experiment(args.config, Path(args.output_dir) if args.output_dir else None)
    manifest = run_experiment(cfg)
    print(json.dumps(manifest.to_dict()["stages"], indent=2))
    return 0 if manifest.ok else 1


def cmd_verify_prop2(args) -> int:
    manifest = RunManifest.load(args.manifest)
    rep = verify_prop2(manifest, args.delta, args.mode_threshold)
    _emit(rep, args.out)
    return 0 if rep["pass"] else 1


def cmd_emit(args) -> int:
    manifest = RunManifest.load(args.manifest)
    files = emit_tables(manifest, args.format, Path(args.out_dir) if args.out_dir else None)
    print(json.dumps([str(f) for f in files]))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="transmute", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check model hypotheses at sample points")
    _add_model(p)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("averaged-flow", help="integrate the averaged vector field")
    _add_model(p)
    p.add_argument("--z0", required=True)
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_averaged_flow)

    p = sub.add_parser("simulate", help="Monte Carlo exits to CSV")
    _add_model(p)
    _add_eps(p)
    p.add_argument("--dt", type=float, default=None, help="Euler step (default eps/20)")
    p.add_argument("--tmax", type=float, default=50.0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--z0", default=None)
    p.add_argument("--mode", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--rates", default=None, help='JSON rate schedule, e.g. {"1->2": "2"}')
    p.add_argument("--paths", type=int, default=0, help="write paths.csv for the first N trials")
    p.add_argument("--with-status", action="store_true",
                   help="append censored flag and likelihood weight columns")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("exit-stats", help="summarize an exits table")
    p.add_argument("--exits", required=True)
    p.add_argument("--z-bar", default=None)
    p.add_argument("--delta", type=float, action="append", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_exit_stats)

    p = sub.add_parser("ldp-verify", help="randomized invariant suite for the LDP engine")
    _add_model(p)
    _add_eps(p)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ldp_verify)

    p = sub.add_parser("action", help="action functional of a path CSV")
    _add_model(p)
    _add_eps(p)
    p.add_argument("--path", required=True)
    p.add_argument("--mode", choices=["S", "I", "timed"], default="I")
    p.add_argument("--rates", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_action)

    p = sub.add_parser("quasipotential", help="exit profile and assumption report")
    _add_model(p)
    _add_eps(p)
    p.add_argument("--boundary-samples", type=int, default=16)
    p.add_argument("--Tgrid", default=None)
    p.add_argument("--N", type=int, default=40)
    p.add_argument("--starts", type=int, default=1)
    p.add_argument("--z-start", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_quasipotential)

    for name, fn in (("dirichlet", cmd_dirichlet), ("dirichlet-sweep", cmd_dirichlet_sweep)):
        p = sub.add_parser(name, help="coupled Dirichlet solve" if name == "dirichlet"
                           else "PDE values at a probe across eps")
        _add_model(p)
        if name == "dirichlet":
            _add_eps(p)
            p.add_argument("--out", required=True)
        else:
            p.add_argument("--eps-list", required=True)
            p.add_argument("--deltahat", type=float, default=None)
            p.add_argument("--probe", required=True)
            p.add_argument("--expected", type=float, default=None)
            p.add_argument("--profile", default=None, help="quasipotential JSON supplying z_bar and k0")
            p.add_argument("--cells-per-eps", type=float, default=10.0)
            p.add_argument("--out", default=None)
        p.add_argument("--h", type=float, default=0.01)
        p.add_argument("--tol", type=float, default=1e-10)
        p.add_argument("--method", choices=["direct", "gmres", "bicgstab"], default="direct")
        p.add_argument("--scheme", choices=["fitted", "upwind"], default="fitted")
        p.set_defaults(func=fn)

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("config")
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify-prop2", help="exit concentration verdicts from a run")
    p.add_argument("manifest")
    p.add_argument("--delta", type=float, default=0.15)
    p.add_argument("--mode-threshold", type=float, default=0.9)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_verify_prop2)

    p = sub.add_parser("emit", help="re-render a run's exit tables as csv or json")
    p.add_argument("manifest")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_emit)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "delta", "x") is None:
        args.delta = [0.15]
    try:
        return args.func(args)
    except (CLIError, ConfigError, ModelConfigError, GridError, MaximumPrincipleError,
            ValueError, OSError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
