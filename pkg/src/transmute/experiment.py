"""Declarative experiments: quasipotential -> exit Monte Carlo -> PDE sweep.

A config (TOML or JSON) names the model, a root seed, an output directory
and the stages to run::

    [experiment]
    model = "model.toml"          # or {builtin = "two-mode-linear", params = {...}}
    seed = 7
    output_dir = "runs/demo"
    stages = ["quasipotential", "exits", "sweep"]

    [quasipotential]
    eps = 0.1
    boundary_samples = 16
    z_start = [0.0, 0.0]

    [exits]
    eps = [0.4, 0.2, 0.1, 0.05]
    trials = 10000
    z0 = [0.0, 0.0]
    k0 = 1

    [sweep]
    eps = [0.4, 0.2, 0.1, 0.05]
    probe = [0.0, 0.0]

Every stage's parameters are validated before any stage runs. Random
streams derive from ``(seed, stage name, trial index)``.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from . import __version__
from .dirichlet import SolveConfig, limit_sweep
from .model import ModelConfigError, ModelSpec, builtin_model, load_model, model_from_dict
from .quasipotential import (
    ExitProfile,
    boundary_samples,
    check_assumptions,
    default_T_grid,
    find_exit_minimizer,
)
from .simulate import ExitStatistics, SimConfig, batch_exit_mc

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "StageRecord",
    "RunManifest",
    "load_experiment",
    "run_experiment",
    "verify_prop2",
    "emit_tables",
    "exits_columns",
    "write_table",
    "read_table",
    "format_float",
    "STAGES",
]

log = logging.getLogger(__name__)

STAGES = ("quasipotential", "exits", "sweep")
DEPENDS = {"quasipotential": (), "exits": (), "sweep": ("quasipotential",)}
OUTPUT_ENV = "TRANSMUTE_OUTPUT_DIR"


class ConfigError(ValueError):
    """Invalid experiment configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


# ---------------------------------------------------------------------------
# Serialization helpers
# ---------------------------------------------------------------------------


def format_float(x: float) -> str:
    """17 significant digits, which round-trips every double."""
    return format(float(x), ".17g")


def exits_columns(d: int, K: int) -> list[str]:
    return ["tau"] + [f"z{i + 1}" for i in range(d)] + ["mode"] + [f"r{k + 1}" for k in range(K)]


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format_float(v)


def write_table(path: Path, columns: Sequence[str], rows: Sequence[Sequence], fmt: str = "csv") -> Path:
    path = Path(path)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(v) for v in r])
        path.write_text(buf.getvalue())
    elif fmt == "json":
        data = {
            "columns": list(columns),
            "rows": [[int(v) if isinstance(v, (int, np.integer)) else float(v) for v in r] for r in rows],
        }
        path.write_text(json.dumps(data, indent=1) + "\n")
    else:
        raise ValueError(f"unknown table format {fmt!r}")
    return path


def read_table(path: Path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    if path.suffix == ".json":
        data = json.loads(path.read_text())
        return data["columns"], np.asarray(data["rows"], dtype=float).reshape(-1, len(data["columns"]))
    with path.open() as fh:
        rd = csv.reader(fh)
        cols = next(rd)
        rows = [[float(v) for v in r] for r in rd]
    return cols, np.asarray(rows, dtype=float).reshape(-1, len(cols))


def _dump_json(path: Path, data: Any) -> Path:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


def _floats(sec: Mapping, key: str, full: str, default=None, length: Optional[int] = None) -> list[float]:
    val = sec.get(key, default)
    if val is None:
        raise ConfigError(full, "missing")
    if isinstance(val, (int, float)):
        val = [val]
    try:
        out = [float(v) for v in val]
    except (TypeError, ValueError):
        raise ConfigError(full, "expected a list of numbers") from None
    if length is not None and len(out) != length:
        raise ConfigError(full, f"expected {length} numbers")
    if not all(math.isfinite(v) for v in out):
        raise ConfigError(full, "numbers must be finite")
    return out


def _num(sec: Mapping, key: str, full: str, default=None, positive: bool = True) -> float:
    val = sec.get(key, default)
    if val is None:
        raise ConfigError(full, "missing")
    try:
        out = float(val)
    except (TypeError, ValueError):
        raise ConfigError(full, "expected a number") from None
    if positive and not out > 0:
        raise ConfigError(full, "must be positive")
    return out


def _int(sec: Mapping, key: str, full: str, default=None, minimum: int = 1) -> int:
    val = sec.get(key, default)
    if val is None:
        raise ConfigError(full, "missing")
    if isinstance(val, bool) or not isinstance(val, (int, np.integer)):
        raise ConfigError(full, "expected an integer")
    if val < minimum:
        raise ConfigError(full, f"must be >= {minimum}")
    return int(val)


def _decreasing(vals: list[float], full: str):
    if any(v <= 0 for v in vals):
        raise ConfigError(full, "values must be positive")
    if any(b >= a for a, b in zip(vals, vals[1:])):
        raise ConfigError(full, "values must be strictly decreasing")


@dataclass
class ExperimentConfig:
    model: Any
    seed: int
    output_dir: Path
    stages: list[str]
    params: dict[str, dict]
    formats: tuple[str, ...] = ("csv",)
    source: Optional[Path] = None
    raw: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(canon.encode()).hexdigest()

    def load_spec(self) -> ModelSpec:
        m = self.model
        try:
            if isinstance(m, Mapping):
                if "builtin" in m:
                    return builtin_model(str(m["builtin"]), m.get("params", {}))
                return model_from_dict(m)
            path = Path(m)
            if not path.is_absolute() and self.source is not None:
                path = self.source.parent / path
            return load_model(path)
        except ModelConfigError as exc:
            raise ConfigError(f"experiment.model.{exc.key}", str(exc)) from exc
        except (OSError, ValueError) as exc:
            raise ConfigError("experiment.model", str(exc)) from exc


def _validate_stage(name: str, sec: Mapping, spec: ModelSpec) -> dict:
    d, K = spec.d, spec.K
    p = f"{name}."
    if name == "quasipotential":
        out = {
            "eps": _num(sec, "eps", p + "eps", 0.1),
            "deltahat": _num(sec, "deltahat", p + "deltahat", None) if "deltahat" in sec else None,
            "boundary_samples": _int(sec, "boundary_samples", p + "boundary_samples", 16, 2),
            "N": _int(sec, "N", p + "N", 40, 8),
            "starts": _int(sec, "starts", p + "starts", 1, 1),
            "T_grid": _floats(sec, "T_grid", p + "T_grid") if "T_grid" in sec else None,
            "z_start": _floats(sec, "z_start", p + "z_start", length=d) if "z_start" in sec else None,
        }
        if out["T_grid"] is not None and any(t <= 0 for t in out["T_grid"]):
            raise ConfigError(p + "T_grid", "horizons must be positive")
        if out["z_start"] is not None and not spec.inside(np.asarray(out["z_start"])):
            raise ConfigError(p + "z_start", "must lie inside G")
        return out
    if name == "exits":
        eps = _floats(sec, "eps", p + "eps")
        _decreasing(eps, p + "eps")
        z0 = _floats(sec, "z0", p + "z0", length=d)
        k0 = _int(sec, "k0", p + "k0", 1, 1)
        if k0 > K:
            raise ConfigError(p + "k0", f"mode must be in 1..{K}")
        return {
            "eps": eps,
            "trials": _int(sec, "trials", p + "trials", 1000, 1),
            "z0": z0,
            "k0": k0,
            "dt_per_eps": _num(sec, "dt_per_eps", p + "dt_per_eps", 20.0),
            "t_max": _num(sec, "t_max", p + "t_max", 50.0),
            "deltahat_power": _num(sec, "deltahat_power", p + "deltahat_power", 2.0),
            "shards": _int(sec, "shards", p + "shards", 1, 1),
            "workers": _int(sec, "workers", p + "workers", 1, 1),
            "deltas": _floats(sec, "deltas", p + "deltas", [0.15]),
        }
    if name == "sweep":
        eps = _floats(sec, "eps", p + "eps")
        _decreasing(eps, p + "eps")
        probe = _floats(sec, "probe", p + "probe", length=d)
        if not spec.inside(np.asarray(probe)):
            raise ConfigError(p + "probe", "must lie inside G")
        if d > 3:
            raise ConfigError(p, "PDE sweep needs total dimension <= 3")
        return {
            "eps": eps,
            "probe": probe,
            "h": _num(sec, "h", p + "h", 0.01),
            "cells_per_eps": _num(sec, "cells_per_eps", p + "cells_per_eps", 10.0),
            "method": str(sec.get("method", "direct")),
            "scheme": str(sec.get("scheme", "fitted")),
        }
    raise ConfigError("experiment.stages", f"unknown stage {name!r}")


def _read_mapping(path: Path) -> dict:
    text = path.read_text()
    if path.suffix.lower() == ".json":
        return json.loads(text)
    try:
        import tomllib  # type: ignore[import-not-found]
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    return tomllib.loads(text)


def experiment_from_dict(raw: Mapping, source: Optional[Path] = None,
                         output_dir: Optional[Path] = None) -> ExperimentConfig:
    exp = raw.get("experiment")
    if not isinstance(exp, Mapping):
        raise ConfigError("experiment", "missing section")
    if "model" not in exp:
        raise ConfigError("experiment.model", "missing")
    if "seed" not in exp:
        raise ConfigError("experiment.seed", "an explicit seed is required")
    seed = _int(exp, "seed", "experiment.seed", minimum=0)
    stages = exp.get("stages", [])
    if not isinstance(stages, list) or not all(isinstance(s, str) for s in stages):
        raise ConfigError("experiment.stages", "expected a list of stage names")
    for s in stages:
        if s not in STAGES:
            raise ConfigError("experiment.stages", f"unknown stage {s!r}")
    formats = tuple(exp.get("formats", ["csv"]))
    for f in formats:
        if f not in ("csv", "json"):
            raise ConfigError("experiment.formats", f"unknown format {f!r}")
    out = output_dir or os.environ.get(OUTPUT_ENV) or exp.get("output_dir")
    if not out:
        raise ConfigError("experiment.output_dir", "missing (or set TRANSMUTE_OUTPUT_DIR)")
    cfg = ExperimentConfig(exp["model"], seed, Path(out), list(stages), {}, formats, source,
                           json.loads(json.dumps(dict(raw), default=str)))
    spec = cfg.load_spec()
    for s in stages:
        sec = raw.get(s, {})
        if not isinstance(sec, Mapping):
            raise ConfigError(s, "expected a table")
        cfg.params[s] = _validate_stage(s, sec, spec)
    return cfg


def load_experiment(path: str | Path, output_dir: Optional[Path] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = _read_mapping(path)
    except (OSError, ValueError) as exc:
        raise ConfigError("experiment", f"cannot read {path}: {exc}") from exc
    return experiment_from_dict(raw, path, output_dir)


# ---------------------------------------------------------------------------
# Manifest and stages
# ---------------------------------------------------------------------------


@dataclass
class StageRecord:
    name: str
    status: str = "pending"
    wall_time: float = 0.0
    outputs: list[str] = field(default_factory=list)
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return {"name": self.name, "status": self.status, "wall_time": self.wall_time,
                "outputs": self.outputs, "error": self.error}


@dataclass
class RunManifest:
    config_hash: str
    version: str
    output_dir: Path
    seed: int
    stages: list[StageRecord] = field(default_factory=list)
    model: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(s.status == "done" for s in self.stages)

    def stage(self, name: str) -> Optional[StageRecord]:
        for s in self.stages:
            if s.name == name:
                return s
        return None

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "version": self.version,
            "seed": self.seed,
            "output_dir": str(self.output_dir),
            "model": self.model,
            "params": self.params,
            "stages": [s.to_dict() for s in self.stages],
        }

    def write(self) -> Path:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        return _dump_json(self.output_dir / "manifest.json", self.to_dict())

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        data = json.loads(path.read_text())
        return cls(
            data["config_hash"], data["version"], path.parent, int(data["seed"]),
            [StageRecord(**s) for s in data["stages"]], data.get("model", {}), data.get("params", {}),
        )


def _stage_quasipotential(spec: ModelSpec, p: dict, seed: int, out: Path) -> list[str]:
    eps = p["eps"]
    dh = p["deltahat"] if p["deltahat"] is not None else eps ** 2
    center = p["z_start"] if p["z_start"] is not None else None
    samples = boundary_samples(spec, p["boundary_samples"], center)
    z_start = p["z_start"]
    interior = np.vstack([spec.box.mean(axis=1), 0.5 * samples + 0.5 * spec.box.mean(axis=1)])
    report = check_assumptions(spec, samples, interior)
    if z_start is None and report.unique_stationary:
        z_start = report.stationary[0].tolist()
    T_grid = p["T_grid"] if p["T_grid"] is not None else default_T_grid(
        spec, z_start if report.unique_stationary else None).tolist()
    profile = find_exit_minimizer(spec, eps, dh, samples, T_grid, p["N"], z_start=z_start,
                                  seed=seed, starts=p["starts"])
    data = {"eps": eps, "deltahat": dh, "T_grid": list(T_grid), "N": p["N"],
            "profile": profile.to_dict(), "assumptions": report.to_dict()}
    _dump_json(out / "quasipotential.json", data)
    return ["quasipotential.json"]


def _exits_name(eps: float, fmt: str) -> str:
    return f"exits_eps{format(eps, 'g')}.{fmt}"


def _stage_exits(spec: ModelSpec, p: dict, seed: int, out: Path, formats) -> list[str]:
    files = []
    summary = []
    for eps in p["eps"]:
        cfg = SimConfig(eps=eps, deltahat=eps ** p["deltahat_power"], dt=eps / p["dt_per_eps"],
                        t_max=p["t_max"], seed=seed, trials=p["trials"], shards=p["shards"],
                        workers=p["workers"], stream=f"exits:{format(eps, 'g')}")
        stats = batch_exit_mc(spec, cfg, p["z0"], p["k0"] - 1)
        rows = _exit_rows(stats)
        for fmt in formats:
            write_table(out / _exits_name(eps, fmt), exits_columns(spec.d, spec.K), rows, fmt)
            files.append(_exits_name(eps, fmt))
        summary.append({"eps": eps, "trials": stats.trials, "censored": int(stats.censored.sum()),
                        "mean_occupation": stats.mean_occupation().tolist()})
    _dump_json(out / "exits_summary.json", summary)
    files.append("exits_summary.json")
    return files


def _exit_rows(stats: ExitStatistics) -> list[list]:
    rows = []
    for i in range(stats.trials):
        if stats.censored[i]:
            continue
        rows.append([float(stats.tau[i]), *map(float, stats.z[i]), int(stats.mode[i]) + 1,
                     *map(float, stats.r[i])])
    return rows


def _stage_sweep(spec: ModelSpec, p: dict, out: Path) -> list[str]:
    qp = json.loads((out / "quasipotential.json").read_text())
    prof = ExitProfile.from_dict(qp["profile"])
    expected = float(spec.boundary_value(prof.z_bar, prof.k0))
    base = SolveConfig(p["eps"][0], None, p["h"], method=p["method"], scheme=p["scheme"])
    rows = limit_sweep(spec, base, p["eps"], p["probe"], expected, p["cells_per_eps"])
    devs = np.array([r.deviations for r in rows])
    tail = devs[-3:]
    monotone = [bool(np.all(np.diff(tail[:, k]) <= 0)) for k in range(spec.K)]
    data = {"probe": p["probe"], "expected": expected, "k0": prof.k0 + 1,
            "z_bar": prof.z_bar.tolist(), "rows": [r.to_dict() for r in rows],
            "tail_non_increasing": monotone}
    _dump_json(out / "sweep.json", data)
    return ["sweep.json"]


def run_experiment(config: ExperimentConfig) -> RunManifest:
    """Run the configured stages in dependency order and write the manifest."""
    spec = config.load_spec()
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(config.config_hash, __version__, out, config.seed,
                           model=spec.to_dict(), params=config.params)
    order = [s for s in STAGES if s in config.stages]
    failed: set[str] = set()
    for name in order:
        rec = StageRecord(name)
        manifest.stages.append(rec)
        missing = [d for d in DEPENDS[name] if d not in order or d in failed]
        if missing:
            rec.status = "skipped"
            rec.error = f"needs stage(s) {', '.join(missing)}"
            failed.add(name)
            continue
        t0 = time.perf_counter()
        try:
            p = config.params[name]
            if name == "quasipotential":
                rec.outputs = _stage_quasipotential(spec, p, config.seed, out)
            elif name == "exits":
                rec.outputs = _stage_exits(spec, p, config.seed, out, config.formats)
            elif name == "sweep":
                rec.outputs = _stage_sweep(spec, p, out)
            rec.status = "done"
        except Exception as exc:  # recorded in the manifest, dependents halt
            log.exception("stage %s failed", name)
            rec.status = "failed"
            rec.error = f"{type(exc).__name__}: {exc}"
            failed.add(name)
        rec.wall_time = time.perf_counter() - t0
        manifest.write()
    manifest.write()
    return manifest


# ---------------------------------------------------------------------------
# Post-processing
# ---------------------------------------------------------------------------


def _binomial(hits: np.ndarray) -> tuple[float, float]:
    n = hits.size
    p = float(hits.mean()) if n else math.nan
    se = math.sqrt(max(p * (1 - p), 0.0) / n) if n else math.nan
    return p, se


def verify_prop2(manifest: RunManifest, delta: float = 0.15, mode_threshold: float = 0.9,
                 z_bar=None, k0: Optional[int] = None) -> dict:
    """Exit-position and exit-mode concentration across the exit batches.

    ``z_bar`` and ``k0`` (0-based) default to the quasipotential stage's profile.
    """
    ex = manifest.stage("exits")
    if ex is None or ex.status != "done":
        raise ValueError("manifest has no completed exits stage")
    if z_bar is None or k0 is None:
        qp_path = manifest.output_dir / "quasipotential.json"
        if not qp_path.exists():
            raise ValueError("manifest has no quasipotential profile")
        prof = ExitProfile.from_dict(json.loads(qp_path.read_text())["profile"])
        z_bar = prof.z_bar if z_bar is None else z_bar
        k0 = prof.k0 if k0 is None else k0
    z_bar = np.asarray(z_bar, dtype=float)
    eps_list = manifest.params["exits"]["eps"]
    if len(eps_list) < 3:
        raise ValueError("need exit batches at >= 3 values of eps")
    rows = []
    for eps in eps_list:
        cols, data = read_table(manifest.output_dir / _exits_name(eps, "csv")) \
            if (manifest.output_dir / _exits_name(eps, "csv")).exists() \
            else read_table(manifest.output_dir / _exits_name(eps, "json"))
        d = z_bar.size
        z = data[:, 1:1 + d]
        mode = data[:, 1 + d].astype(int) - 1
        far, far_se = _binomial((np.linalg.norm(z - z_bar, axis=1) > delta).astype(float))
        pm, pm_se = _binomial((mode == k0).astype(float))
        rows.append({"eps": eps, "n": int(len(data)), "prob_far": far, "prob_far_se": far_se,
                     "prob_mode": pm, "prob_mode_se": pm_se})
    far = np.array([r["prob_far"] for r in rows])
    fse = np.array([r["prob_far_se"] for r in rows])
    pm = np.array([r["prob_mode"] for r in rows])
    pse = np.array([r["prob_mode_se"] for r in rows])
    far_decreasing = bool(np.all(np.diff(far) < 0) or np.all(far == 0))
    comb = 2 * np.sqrt(pse[1:] ** 2 + pse[:-1] ** 2)
    mode_trend = bool(pm[-1] >= pm[0] and np.all(np.diff(pm) >= -comb))
    mode_final = bool(pm[-1] >= mode_threshold)
    return {
        "delta": delta,
        "z_bar": z_bar.tolist(),
        "k0": int(k0) + 1,
        "rows": rows,
        "far_decreasing": far_decreasing,
        "far_trend_within_se": bool(np.all(np.diff(far) <= 2 * np.sqrt(fse[1:] ** 2 + fse[:-1] ** 2))),
        "mode_trend": mode_trend,
        "mode_final_ok": mode_final,
        "mode_threshold": mode_threshold,
        "pass": far_decreasing and mode_final,
    }


def emit_tables(manifest: RunManifest, fmt: str = "csv", out_dir: Optional[Path] = None) -> list[Path]:
    """Re-render every exits table of a manifest in ``fmt``."""
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown format {fmt!r}")
    out_dir = Path(out_dir) if out_dir is not None else manifest.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    ex = manifest.stage("exits")
    if ex is None or ex.status != "done":
        raise ValueError("manifest has no completed exits stage")
    written = []
    for eps in manifest.params["exits"]["eps"]:
        src = manifest.output_dir / _exits_name(eps, "csv")
        if not src.exists():
            src = manifest.output_dir / _exits_name(eps, "json")
        cols, data = read_table(src)
        mode_col = cols.index("mode")
        rows = [[int(v) if j == mode_col else float(v) for j, v in enumerate(r)] for r in data]
        written.append(write_table(out_dir / _exits_name(eps, fmt), cols, rows, fmt))
    return written
