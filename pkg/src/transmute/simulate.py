"""Monte Carlo trajectories of the switching diffusion.

The continuous part is advanced by Euler-Maruyama::

    x += F dt + sqrt(deltahat) dv
    y += f_k dt + sqrt(eps) sigma_k dw

Mode switches are generated by thinning: in mode ``k`` candidate events
arrive from an exponential clock of rate ``Xi_k / eps`` where ``Xi_k`` bounds
the leaving rate ``c_k(z) = sum_j c_kj(z)``; a candidate at state ``z`` is
accepted with probability ``c_k(z) / Xi_k`` and the target ``j`` is drawn
proportionally to ``c_kj(z)``. Candidate times split the Euler step, so the
switch happens exactly at the clock time.

Everything runs vectorized over a batch of trials, each with its own random
stream (see :mod:`transmute.rng`).
"""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.stats import qmc

from .expr import ExprField, parse_expr
from .model import ModelSpec
from .rng import StreamBank, trial_generator

__all__ = [
    "SimConfig",
    "HybridState",
    "SwitchEvent",
    "TrajectoryRecord",
    "ExitRecord",
    "ExitStatistics",
    "SimulationDivergence",
    "rate_schedule",
    "thinning_bounds",
    "step",
    "simulate_until_exit",
    "simulate_batch",
    "batch_exit_mc",
    "occupation_fractions",
    "likelihood_ratio",
]

log = logging.getLogger(__name__)

DIVERGENCE_NORM = 1e6
THINNING_SAFETY = 1.5


class SimulationDivergence(ArithmeticError):
    pass


@dataclass(frozen=True)
class SimConfig:
    """Simulation parameters.

    ``rates`` optionally replaces the model's switching rates by a schedule
    (expressions in ``z`` and ``t``); trajectories are then drawn under that
    reference measure and carry likelihood ratios back to the model.
    ``rate_bounds`` overrides the thinning bounds ``Xi_k`` (testing hook).
    """

    eps: float
    deltahat: float = 0.0
    dt: float = 1e-3
    t_max: float = 50.0
    seed: int = 0
    trials: int = 1
    shards: int = 1
    workers: int = 1
    stream: str = "simulate"
    record: int = 0
    rates: Optional[Mapping[tuple[int, int], ExprField]] = None
    rate_bounds: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.deltahat < 0:
            raise ValueError("deltahat must be non-negative")
        if self.dt <= 0 or self.t_max <= 0:
            raise ValueError("dt and t_max must be positive")
        if self.trials < 1 or self.shards < 1 or self.workers < 1:
            raise ValueError("trials, shards and workers must be >= 1")
        if self.dt > self.eps / 10:
            warnings.warn(
                f"dt={self.dt:g} exceeds eps/10={self.eps / 10:g}; switching is poorly resolved",
                RuntimeWarning,
                stacklevel=3,
            )

    @property
    def regularization_ratio(self) -> float:
        """``deltahat / eps``; the asymptotics assume this tends to zero."""
        return self.deltahat / self.eps


@dataclass
class HybridState:
    z: np.ndarray
    mode: int
    t: float
    r: np.ndarray

    def copy(self) -> "HybridState":
        return HybridState(self.z.copy(), self.mode, self.t, self.r.copy())


@dataclass(frozen=True)
class SwitchEvent:
    time: float
    from_mode: int
    to_mode: int


@dataclass
class TrajectoryRecord:
    """Sampled path; ``modes[i]`` is the mode in force on ``[times[i], times[i+1])``."""

    times: np.ndarray
    positions: np.ndarray
    modes: np.ndarray
    events: list[SwitchEvent]
    final: HybridState
    exited: bool


@dataclass(frozen=True)
class ExitRecord:
    tau: float
    z: np.ndarray
    mode: int
    r: np.ndarray
    censored: bool


def rate_schedule(spec: ModelSpec, rates: Mapping[str, str | float]) -> dict[tuple[int, int], ExprField]:
    """Parse a ``{"1->2": expr, ...}`` mapping into rate fields over ``(z, t)``."""
    out = {}
    for key, val in rates.items():
        a, b = str(key).split("->")
        k, j = int(a) - 1, int(b) - 1
        if not (0 <= k < spec.K and 0 <= j < spec.K) or k == j:
            raise ValueError(f"bad rate key {key!r}")
        out[(k, j)] = parse_expr(val if isinstance(val, str) else repr(float(val)), spec.d)
    for k in range(spec.K):
        for j in range(spec.K):
            if k != j and (k, j) not in out:
                raise ValueError(f"rate schedule misses {k + 1}->{j + 1}")
    return out


def _rate_matrix(rates: Mapping[tuple[int, int], ExprField], K: int, z, t) -> np.ndarray:
    """Off-diagonal rates (zero diagonal), shape ``(N, K, K)``."""
    out = np.zeros(z.shape[:-1] + (K, K))
    for (k, j), c in rates.items():
        out[..., k, j] = c.evaluate(z, t)
    return out


def thinning_bounds(spec: ModelSpec, rates=None, t_max: float = 0.0, samples: int = 1024,
                    seed: int = 0) -> np.ndarray:
    """Estimate ``Xi_k >= sup c_k`` over the box (and ``[0, t_max]``), times 1.5."""
    rates = spec.rates if rates is None else rates
    if spec.K == 1:
        return np.zeros(1)
    if all(c.is_constant for c in rates.values()):
        pts = spec.box.mean(axis=1)[None, :]
        ts = np.zeros(1)
    else:
        sampler = qmc.Halton(d=spec.d + 1, scramble=True, seed=seed)
        raw = sampler.random(samples)
        pts = qmc.scale(raw[:, :-1], spec.box[:, 0], spec.box[:, 1])
        ts = raw[:, -1] * t_max
    leave = _rate_matrix(rates, spec.K, pts, ts).sum(axis=-1)
    return THINNING_SAFETY * leave.max(axis=0)


# ---------------------------------------------------------------------------
# Vectorized engine
# ---------------------------------------------------------------------------


class _Batch:
    """Mutable state of a batch of trials."""

    def __init__(self, spec: ModelSpec, cfg: SimConfig, z0, k0: int, bank: StreamBank,
                 record: int = 0):
        B = len(bank)
        self.spec, self.cfg, self.bank = spec, cfg, bank
        self.model_rates = spec.rates
        self.sim_rates = cfg.rates if cfg.rates is not None else spec.rates
        self.tilted = cfg.rates is not None
        if cfg.rate_bounds is not None:
            self.xi = np.asarray(cfg.rate_bounds, dtype=float)
        else:
            self.xi = thinning_bounds(spec, self.sim_rates, cfg.t_max)
        self.z = np.tile(np.asarray(z0, dtype=float), (B, 1))
        self.mode = np.full(B, int(k0))
        self.t = np.zeros(B)
        self.r = np.zeros((B, spec.K))
        self.alive = np.ones(B, dtype=bool)
        self.exited = np.zeros(B, dtype=bool)
        self.logw = np.zeros(B)
        self.switches = np.zeros(B, dtype=int)
        self.bound_violations = 0
        self.next_event = np.full(B, np.inf)
        self._draw_clock(np.arange(B))
        self.record = record
        if record:
            self.rec_t = [[0.0] for _ in range(record)]
            self.rec_z = [[self.z[i].copy()] for i in range(record)]
            self.rec_m = [[int(k0)] for _ in range(record)]
            self.rec_events: list[list[SwitchEvent]] = [[] for _ in range(record)]

    # -- helpers ------------------------------------------------------------

    def _draw_clock(self, idx):
        if idx.size == 0:
            return
        rate = self.xi[self.mode[idx]] / self.cfg.eps
        u = self.bank.uniforms(idx)
        with np.errstate(divide="ignore"):
            wait = np.where(rate > 0, -np.log(u) / np.where(rate > 0, rate, 1.0), np.inf)
        self.next_event[idx] = self.t[idx] + wait

    def _drift_noise(self, idx, h):
        spec, cfg = self.spec, self.cfg
        z = self.z[idx]
        modes = self.mode[idx]
        xi = self.bank.normals(idx)
        out = np.empty_like(z)
        sq = np.sqrt(h)[:, None]
        for k in np.unique(modes):
            sel = modes == k
            zk = z[sel]
            inc = spec.drift(zk, k) * h[sel][:, None]
            if spec.n and cfg.deltahat > 0:
                inc[:, : spec.n] += math.sqrt(cfg.deltahat) * xi[sel, : spec.n] * sq[sel]
            if spec.m:
                s = spec.sigma_at(zk, k)
                dw = xi[sel, spec.n:] * sq[sel]
                inc[:, spec.n:] += math.sqrt(cfg.eps) * np.einsum("bij,bj->bi", s, dw)
            out[sel] = zk + inc
        return out

    def _leave_rates(self, rates, z, t, modes):
        C = _rate_matrix(rates, self.spec.K, z, t)
        rows = C[np.arange(len(modes)), modes]
        return rows, rows.sum(axis=-1)

    def _bisect(self, za, zb):
        """Points on ``[za, zb]`` with ``0 <= phi <= tol``; returns (fraction, point)."""
        spec = self.spec
        tol = 1e-6 * spec.diameter
        lo = np.zeros(len(za))
        hi = np.ones(len(za))
        phi_hi = spec.level(zb)
        for _ in range(200):
            todo = phi_hi > tol
            if not todo.any():
                break
            mid = 0.5 * (lo + hi)
            pm = spec.level(za + mid[:, None] * (zb - za))
            up = todo & (pm >= 0)
            down = todo & (pm < 0)
            hi = np.where(up, mid, hi)
            phi_hi = np.where(up, pm, phi_hi)
            lo = np.where(down, mid, lo)
            if np.all(hi[todo] - lo[todo] < 1e-15):
                break
        return hi, za + hi[:, None] * (zb - za)

    # -- main loop ------------------------------------------------------------

    def advance(self, duration: float, check_exit: bool = True):
        """Advance every live trial by ``duration`` (or until it exits)."""
        spec = self.spec
        remaining = np.where(self.alive, duration, 0.0)
        tiny = 1e-12 * duration
        while True:
            idx = np.nonzero(remaining > tiny)[0]
            if idx.size == 0:
                break
            to_event = self.next_event[idx] - self.t[idx]
            h = np.maximum(np.minimum(remaining[idx], to_event), 0.0)
            hit = to_event <= remaining[idx]
            z_old = self.z[idx]
            t_old = self.t[idx]
            modes = self.mode[idx]
            z_new = self._drift_noise(idx, h)
            if not np.all(np.isfinite(z_new)) or np.any(np.abs(z_new) > DIVERGENCE_NORM):
                raise SimulationDivergence("trajectory norm exceeded 1e6")
            frac = np.ones(idx.size)
            out = np.zeros(idx.size, dtype=bool)
            if check_exit:
                out = spec.level(z_new) >= 0
                if out.any():
                    frac[out], z_new[out] = self._bisect(z_old[out], z_new[out])
            h_eff = h * frac
            t_new = t_old + h_eff
            if self.tilted:
                self.logw[idx] += self._log_density_drift(z_old, t_old, z_new, t_new, modes, h_eff)
            self.z[idx] = z_new
            self.t[idx] = t_new
            self.r[idx, modes] += h_eff
            remaining[idx] -= h
            if out.any():
                dead = idx[out]
                remaining[dead] = 0.0
                self.alive[dead] = False
                self.exited[dead] = True
            ev = idx[hit & ~out]
            if ev.size:
                self._events(ev)
            if self.record:
                for i in idx[idx < self.record]:
                    self.rec_t[i].append(float(self.t[i]))
                    self.rec_z[i].append(self.z[i].copy())
                    self.rec_m[i].append(int(self.mode[i]))

    def _log_density_drift(self, z0, t0, z1, t1, modes, h):
        eps = self.cfg.eps
        _, ref0 = self._leave_rates(self.sim_rates, z0, t0, modes)
        _, ref1 = self._leave_rates(self.sim_rates, z1, t1, modes)
        _, mod0 = self._leave_rates(self.model_rates, z0, t0, modes)
        _, mod1 = self._leave_rates(self.model_rates, z1, t1, modes)
        return 0.5 * h * ((ref0 - mod0) + (ref1 - mod1)) / eps

    def _events(self, ev):
        z, t, k = self.z[ev], self.t[ev], self.mode[ev]
        rows, leave = self._leave_rates(self.sim_rates, z, t, k)
        xi = self.xi[k]
        over = leave > xi * (1 + 1e-12)
        if over.any():
            self.bound_violations += int(over.sum())
            log.warning("thinning bound exceeded at %d event(s); acceptance clipped", over.sum())
        u = self.bank.uniforms(ev)
        with np.errstate(divide="ignore", invalid="ignore"):
            accept = u * xi <= leave
        acc = ev[accept]
        if acc.size:
            rows_a = rows[accept]
            cum = np.cumsum(rows_a, axis=1)
            v = self.bank.uniforms(acc) * cum[:, -1]
            target = np.minimum((cum < v[:, None]).sum(axis=1), self.spec.K - 1)
            old = self.mode[acc]
            if self.tilted:
                za, ta = self.z[acc], self.t[acc]
                Cm = _rate_matrix(self.model_rates, self.spec.K, za, ta)
                Cr = _rate_matrix(self.sim_rates, self.spec.K, za, ta)
                ii = np.arange(acc.size)
                ref = Cr[ii, old, target]
                if np.any(ref <= 0):
                    raise ValueError("non-positive reference rate at a switch event")
                self.logw[acc] += np.log(Cm[ii, old, target] / ref)
            self.mode[acc] = target
            self.switches[acc] += 1
            if self.record:
                for j, i in enumerate(acc):
                    if i < self.record:
                        self.rec_events[i].append(SwitchEvent(float(self.t[i]), int(old[j]), int(target[j])))
        self._draw_clock(ev)

    def run(self):
        cfg = self.cfg
        if np.any(self.alive):
            start_out = self.spec.level(self.z) >= 0
            self.alive &= ~start_out
            self.exited |= start_out
        while self.alive.any():
            live_t = self.t[self.alive]
            left = cfg.t_max - live_t.min()
            if left <= 1e-12 * cfg.t_max:
                break
            self.advance(min(cfg.dt, left))
            # censor trials whose clock reached the horizon
            self.alive &= self.t < cfg.t_max * (1 - 1e-12)

    def trajectory(self, i: int) -> TrajectoryRecord:
        final = HybridState(self.z[i].copy(), int(self.mode[i]), float(self.t[i]), self.r[i].copy())
        return TrajectoryRecord(
            np.asarray(self.rec_t[i]),
            np.asarray(self.rec_z[i]),
            np.asarray(self.rec_m[i]),
            list(self.rec_events[i]),
            final,
            bool(self.exited[i]),
        )

    def exit_record(self, i: int) -> ExitRecord:
        return ExitRecord(float(self.t[i]), self.z[i].copy(), int(self.mode[i]),
                          self.r[i].copy(), not bool(self.exited[i]))


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def step(state: HybridState, spec: ModelSpec, cfg: SimConfig,
         rng: np.random.Generator) -> HybridState:
    """Advance one trajectory by ``cfg.dt`` (no exit check).

    The switching clock is redrawn on every call, which is exact in law
    because exponential waiting times are memoryless.
    """
    bank = StreamBank([rng], spec.d)
    b = _Batch(spec, cfg, state.z, state.mode, bank)
    b.t[:] = state.t
    b.r[0] = state.r
    b.next_event += state.t
    b.advance(cfg.dt, check_exit=False)
    return HybridState(b.z[0].copy(), int(b.mode[0]), float(b.t[0]), b.r[0].copy())


def simulate_until_exit(z0, k0: int, spec: ModelSpec, cfg: SimConfig,
                        rng: np.random.Generator | None = None,
                        trial: int = 0) -> tuple[TrajectoryRecord, ExitRecord]:
    """Run one trajectory until it leaves ``G`` or hits ``cfg.t_max``."""
    if rng is None:
        rng = trial_generator(cfg.seed, trial, cfg.stream)
    b = _Batch(spec, cfg, z0, k0, StreamBank([rng], spec.d), record=1)
    b.run()
    return b.trajectory(0), b.exit_record(0)


@dataclass
class ExitStatistics:
    """Per-trial exit data of a batch plus derived estimates.

    ``weights`` are likelihood ratios back to the model measure (all ones
    for untilted runs).
    """

    tau: np.ndarray
    z: np.ndarray
    mode: np.ndarray
    r: np.ndarray
    censored: np.ndarray
    weights: np.ndarray
    switches: np.ndarray
    K: int
    bound_violations: int = 0

    @property
    def trials(self) -> int:
        return len(self.tau)

    @property
    def n_exited(self) -> int:
        return int((~self.censored).sum())

    @property
    def valid(self) -> bool:
        return self.n_exited > 0

    def _binomial(self, hits: np.ndarray) -> tuple[float, float]:
        ok = ~self.censored
        n = ok.sum()
        if n == 0:
            return math.nan, math.nan
        w = self.weights[ok]
        x = hits[ok] * w
        p = float(x.mean())
        se = float(x.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
        return p, se

    def prob_far(self, z_bar, delta: float) -> tuple[float, float]:
        """``P{|z_tau - z_bar| > delta}`` with standard error."""
        dist = np.linalg.norm(self.z - np.asarray(z_bar, dtype=float), axis=1)
        return self._binomial((dist > delta).astype(float))

    def prob_mode(self, k: int) -> tuple[float, float]:
        return self._binomial((self.mode == k).astype(float))

    def mean_occupation(self) -> np.ndarray:
        ok = ~self.censored & (self.tau > 0)
        if not ok.any():
            return np.full(self.K, math.nan)
        return (self.r[ok] / self.tau[ok, None]).mean(axis=0)

    def summary(self, z_bar=None, deltas: Sequence[float] = ()) -> dict:
        out = {
            "trials": self.trials,
            "exited": self.n_exited,
            "censored": int(self.censored.sum()),
            "valid": self.valid,
            "mean_tau": float(self.tau[~self.censored].mean()) if self.valid else None,
            "mean_occupation": self.mean_occupation().tolist(),
            "mode_probs": [list(self.prob_mode(k)) for k in range(self.K)],
            "mean_switches": float(self.switches.mean()),
        }
        if z_bar is not None:
            out["z_bar"] = list(map(float, z_bar))
            out["prob_far"] = {repr(float(d)): list(self.prob_far(z_bar, d)) for d in deltas}
        return out


def _run_shard(args) -> dict:
    spec, cfg, z0, k0, trials = args
    bank = StreamBank.for_trials(cfg.seed, trials, spec.d, cfg.stream)
    b = _Batch(spec, cfg, z0, k0, bank)
    b.run()
    return {
        "tau": b.t, "z": b.z, "mode": b.mode, "r": b.r,
        "censored": ~b.exited, "logw": b.logw, "switches": b.switches,
        "violations": b.bound_violations,
    }


def simulate_batch(spec: ModelSpec, cfg: SimConfig, z0, k0: int) -> ExitStatistics:
    """Run ``cfg.trials`` independent trajectories until exit or censoring."""
    trial_ids = np.arange(cfg.trials)
    shards = [s for s in np.array_split(trial_ids, cfg.shards) if s.size]
    jobs = [(spec, cfg, z0, k0, s) for s in shards]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            parts = list(pool.map(_run_shard, jobs))
    else:
        parts = [_run_shard(j) for j in jobs]
    cat = lambda key: np.concatenate([p[key] for p in parts])
    return ExitStatistics(
        tau=cat("tau"), z=cat("z"), mode=cat("mode"), r=cat("r"),
        censored=cat("censored"), weights=np.exp(cat("logw")),
        switches=cat("switches"), K=spec.K,
        bound_violations=sum(p["violations"] for p in parts),
    )


def batch_exit_mc(spec: ModelSpec, cfg: SimConfig, z0, k0: int) -> ExitStatistics:
    """Exit statistics over ``cfg.trials`` trajectories started at ``(z0, k0)``.

    Raises if every trial was censored (statistics would be meaningless).
    """
    if spec.level(np.asarray(z0, dtype=float)) >= 0:
        log.info("start point is outside G; every trial exits at tau=0")
    stats = simulate_batch(spec, cfg, z0, k0)
    if not stats.valid:
        raise RuntimeError("all trials censored at t_max; exit statistics invalid")
    return stats


def occupation_fractions(traj: TrajectoryRecord) -> np.ndarray:
    t = traj.final.t
    if t <= 0:
        raise ValueError("zero-length trajectory")
    frac = traj.final.r / t
    return frac / frac.sum()


def likelihood_ratio(traj: TrajectoryRecord, spec: ModelSpec,
                     reference_rates: Mapping[tuple[int, int], ExprField], eps: float) -> float:
    """``dP/dQ`` of a recorded path, ``P`` with model rates, ``Q`` with reference rates.

    ``exp{ (1/eps) int [c_nu(ref, s) - c_nu(z_s)] ds - sum log(c_km(ref) / c_km(z)) }``
    with the time integral by the trapezoid rule on the stored nodes.
    """
    K = spec.K
    t, z, modes = traj.times, traj.positions, traj.modes
    if len(t) < 1:
        raise ValueError("empty trajectory")
    idx = np.arange(len(t))
    ref = _rate_matrix(reference_rates, K, z, t)
    mod = _rate_matrix(spec.rates, K, z, t)
    integral = 0.0
    if len(t) > 1:
        m = modes[:-1]
        diff0 = ref[idx[:-1], m].sum(-1) - mod[idx[:-1], m].sum(-1)
        diff1 = ref[idx[1:], m].sum(-1) - mod[idx[1:], m].sum(-1)
        integral = float(np.sum(0.5 * np.diff(t) * (diff0 + diff1)))
    jump = 0.0
    # an event at node i switches modes[i-1] -> modes[i]
    for ev in traj.events:
        i = int(np.searchsorted(t, ev.time, side="right")) - 1
        zi = z[i][None, :]
        c_ref = _rate_matrix(reference_rates, K, zi, np.array([ev.time]))[0, ev.from_mode, ev.to_mode]
        c_mod = mod[i, ev.from_mode, ev.to_mode]
        if c_ref <= 0:
            raise ValueError("non-positive reference rate at a switch event")
        jump += math.log(c_ref / c_mod)
    return math.exp(integral / eps - jump)
