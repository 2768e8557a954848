"""Minimum-action paths, quasipotential and the dominant exit point/mode.

The position-only action of a discretized path is

    I = sum_i dt_i * rho(midpoint_i, velocity_i)

and its gradient with respect to the nodes follows from the envelope
theorem: ``d rho / d q = p*`` (the maximizer) and
``d rho / d z = -d lambda / d z`` at ``p*``. The ``z``-derivative of the
Perron root is ``v (dH/dz) u`` with ``dH/dz`` from central differences of the
frozen coefficients, so one gradient costs one batched conjugate solve plus
``2d`` matrix assemblies.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .ldp import PathDiscretization, local_hamiltonian, rho_batch
from .model import ModelSpec
from .switching import FlowDivergenceError, averaged_drift_batch

__all__ = [
    "MinimizerResult",
    "ExitProfile",
    "AssumptionReport",
    "PathAction",
    "minimize_action",
    "quasipotential_V",
    "find_exit_minimizer",
    "check_assumptions",
    "boundary_samples",
    "stationary_points",
    "default_T_grid",
    "flow_exit",
]

log = logging.getLogger(__name__)

FD_STEP = 1e-6


@dataclass(frozen=True)
class MinimizerResult:
    path: PathDiscretization
    value: float
    T: float
    iterations: int
    grad_norm: float
    dispersion: float
    converged: bool
    start_values: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "T": self.T,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "dispersion": self.dispersion,
            "converged": self.converged,
            "start_values": list(self.start_values),
        }


class PathAction:
    """Discretized position-only action with fixed endpoints and time grid.

    Keeps the last conjugate maximizers per segment as warm starts; they only
    speed up the inner solves, the values do not depend on them.
    """

    def __init__(self, spec: ModelSpec, z_start, z_end, T: float, N: int, eps: float,
                 deltahat: float):
        if N < 1:
            raise ValueError("need at least one segment")
        self.spec, self.eps, self.deltahat = spec, eps, deltahat
        self.z_start = np.asarray(z_start, dtype=float)
        self.z_end = np.asarray(z_end, dtype=float)
        self.T, self.N, self.d = float(T), int(N), spec.d
        self.times = np.linspace(0.0, self.T, self.N + 1)
        self.dt = np.diff(self.times)
        self._warm: Optional[np.ndarray] = None
        self.evaluations = 0

    def nodes(self, x: np.ndarray) -> np.ndarray:
        inner = np.asarray(x, dtype=float).reshape(self.N - 1, self.d)
        return np.vstack([self.z_start, inner, self.z_end])

    def straight_line(self) -> np.ndarray:
        s = (self.times / self.T)[:, None]
        return ((1 - s) * self.z_start + s * self.z_end)[1:-1].ravel()

    def _segments(self, path):
        mid = 0.5 * (path[1:] + path[:-1])
        vel = np.diff(path, axis=0) / self.dt[:, None]
        return mid, vel

    def value_and_grad(self, x: np.ndarray):
        self.evaluations += 1
        path = self.nodes(x)
        mid, vel = self._segments(path)
        loc = local_hamiltonian(self.spec, mid, self.eps, self.deltahat)
        sol = rho_batch(loc, vel, self._warm)
        if not np.all(np.isfinite(sol.value)):
            return math.inf, np.zeros_like(x)
        self._warm = sol.p.copy()
        value = float((self.dt * sol.value).sum())
        lam_z = self._lambda_z(mid, sol.p)
        rho_z = -lam_z
        # d/dphi_i of dt_i rho(mid_i, (phi_{i+1} - phi_i)/dt_i)
        left = 0.5 * self.dt[:, None] * rho_z - sol.p  # w.r.t. phi_i
        right = 0.5 * self.dt[:, None] * rho_z + sol.p  # w.r.t. phi_{i+1}
        g = np.zeros_like(path)
        g[:-1] += left
        g[1:] += right
        return value, g[1:-1].ravel()

    def value(self, x: np.ndarray) -> float:
        return self.value_and_grad(x)[0]

    def _lambda_z(self, mid: np.ndarray, p: np.ndarray) -> np.ndarray:
        S = len(mid)
        alpha = np.zeros((S, self.spec.K))
        lam, u, v = local_hamiltonian(self.spec, mid, self.eps, self.deltahat).perron(p, alpha)
        out = np.empty((S, self.d))
        h = FD_STEP * max(1.0, self.spec.diameter)
        for j in range(self.d):
            e = np.zeros(self.d)
            e[j] = h
            Hp = local_hamiltonian(self.spec, mid + e, self.eps, self.deltahat).matrix(p, alpha)
            Hm = local_hamiltonian(self.spec, mid - e, self.eps, self.deltahat).matrix(p, alpha)
            dH = (Hp - Hm) / (2 * h)
            out[:, j] = np.einsum("ni,nij,nj->n", v, dH, u)
        return out


def _perturbations(action: PathAction, rng: np.random.Generator, count: int) -> list[np.ndarray]:
    scale = np.linalg.norm(action.z_end - action.z_start)
    if scale == 0:
        scale = 0.05 * action.spec.diameter
    s = action.times[1:-1] / action.T
    bump = np.sin(np.pi * s)[:, None]
    base = action.straight_line().reshape(-1, action.d)
    out = []
    for _ in range(count):
        direction = rng.standard_normal(action.d)
        direction *= 0.25 * scale / max(np.linalg.norm(direction), 1e-12)
        out.append((base + bump * direction).ravel())
    return out


def minimize_action(spec: ModelSpec, z_start, z_end, T: float, N: int, eps: float,
                    deltahat: float, seed: int = 0, starts: int = 4,
                    init: Optional[np.ndarray] = None, max_iter: int = 2000,
                    gtol: float = 1e-7) -> MinimizerResult:
    """Local minimum of the discretized action over interior nodes.

    Runs L-BFGS from the straight line plus ``starts - 1`` randomly bent
    initializations (and ``init`` if given) and keeps the best.
    """
    if N < 8:
        raise ValueError("N must be at least 8")
    if spec.n > 0 and deltahat <= 0:
        raise ValueError("deltahat must be positive for finite actions with a slow block")
    action = PathAction(spec, z_start, z_end, T, N, eps, deltahat)
    rng = np.random.default_rng(seed)
    inits = [action.straight_line()] + _perturbations(action, rng, max(starts - 1, 0))
    if init is not None:
        inits.insert(0, np.asarray(init, dtype=float).reshape(N + 1, spec.d)[1:-1].ravel())
    results = []
    for x0 in inits:
        action._warm = None
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = minimize(action.value_and_grad, x0, jac=True, method="L-BFGS-B",
                           options={"maxiter": max_iter, "gtol": gtol, "ftol": 1e-15,
                                    "maxcor": 20})
        results.append(res)
    values = np.array([r.fun for r in results])
    best = results[int(np.argmin(values))]
    action._warm = None
    val, grad = action.value_and_grad(best.x)
    path = PathDiscretization(action.times, action.nodes(best.x))
    finite = values[np.isfinite(values)]
    return MinimizerResult(
        path=path,
        value=max(float(val), 0.0),
        T=float(T),
        iterations=int(sum(r.nit for r in results)),
        grad_norm=float(np.abs(grad).max()) if grad.size else 0.0,
        dispersion=float(finite.max() - finite.min()) if finite.size else math.inf,
        converged=bool(best.success),
        start_values=tuple(float(v) for v in values),
    )


def quasipotential_V(spec: ModelSpec, z_stationary, z_target, eps: float, deltahat: float,
                     T_grid: Sequence[float], N: int, seed: int = 0,
                     starts: int = 4) -> tuple[float, MinimizerResult]:
    """Minimum over the horizon grid of fixed-horizon minimal actions."""
    best: Optional[MinimizerResult] = None
    for i, T in enumerate(T_grid):
        res = minimize_action(spec, z_stationary, z_target, T, N, eps, deltahat,
                              seed=seed + i, starts=starts)
        if best is None or res.value < best.value:
            best = res
    if best is None:
        raise ValueError("empty T grid")
    return best.value, best


# ---------------------------------------------------------------------------
# Geometry and the averaged flow
# ---------------------------------------------------------------------------


def _unit_directions(d: int, count: int) -> np.ndarray:
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d == 2:
        ang = 2 * np.pi * np.arange(count) / count
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    # Fibonacci lattice on the sphere, padded with zeros beyond 3 dims
    i = np.arange(count) + 0.5
    phi = np.arccos(1 - 2 * i / count)
    th = np.pi * (1 + 5 ** 0.5) * i
    pts = np.stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)], axis=1)
    out = np.zeros((count, d))
    out[:, :3] = pts
    return out


def boundary_samples(spec: ModelSpec, count: int, center=None) -> np.ndarray:
    """Points on ``{phi_G = 0}`` found by bisection along rays from ``center``.

    The domain is assumed star-shaped about ``center`` (box center by default).
    """
    c = spec.box.mean(axis=1) if center is None else np.asarray(center, dtype=float)
    if not spec.inside(c):
        raise ValueError("ray center must lie inside G")
    dirs = _unit_directions(spec.d, count)
    reach = 2.0 * spec.diameter
    out = []
    for u in dirs:
        ts = np.linspace(0.0, reach, 257)
        vals = spec.level(c + ts[:, None] * u)
        cross = np.nonzero(vals >= 0)[0]
        if cross.size == 0:
            continue
        hi = ts[cross[0]]
        lo = ts[cross[0] - 1]
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if spec.level(c + mid * u) < 0:
                lo = mid
            else:
                hi = mid
        out.append(c + 0.5 * (lo + hi) * u)
    return np.array(out)


def _jacobian(fn, z, h=1e-6):
    d = z.size
    J = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        J[:, j] = (fn(z + e) - fn(z - e)) / (2 * h)
    return J


def stationary_points(spec: ModelSpec, starts, tol: float = 1e-10,
                      max_iter: int = 100) -> np.ndarray:
    """Zeros of the averaged drift inside G by damped Newton, clustered."""
    fn = lambda z: averaged_drift_batch(spec, z)
    found = []
    for z0 in np.atleast_2d(np.asarray(starts, dtype=float)):
        z = z0.copy()
        for _ in range(max_iter):
            r = fn(z)
            nr = np.linalg.norm(r)
            if nr <= tol:
                break
            J = _jacobian(fn, z)
            try:
                dz = np.linalg.lstsq(J, -r, rcond=None)[0]
            except np.linalg.LinAlgError:
                break
            s = 1.0
            while s > 1e-8 and np.linalg.norm(fn(z + s * dz)) >= nr:
                s *= 0.5
            if s <= 1e-8:
                break
            z = z + s * dz
        if np.linalg.norm(fn(z)) <= tol * 10 and spec.inside(z):
            found.append(z)
    clusters: list[np.ndarray] = []
    radius = 1e-6 * max(spec.diameter, 1.0)
    for z in found:
        if not any(np.linalg.norm(z - c) <= radius for c in clusters):
            clusters.append(z)
    return np.array(clusters).reshape(-1, spec.d)


def default_T_grid(spec: ModelSpec, z_stationary=None, count: int = 8) -> np.ndarray:
    """Geometric horizons over ``[0.5, 8]`` times the linearized relaxation time."""
    scale = 1.0
    if z_stationary is not None:
        J = _jacobian(lambda z: averaged_drift_batch(spec, z), np.asarray(z_stationary, float))
        rates = np.abs(np.linalg.eigvals(J).real)
        rates = rates[rates > 1e-9]
        if rates.size:
            scale = 1.0 / rates.min()
    return np.geomspace(0.5, 8.0, count) * scale


def flow_exit(spec: ModelSpec, z0, dt: float = 1e-3, t_max: float = 100.0):
    """First crossing of ``phi_G = 0`` by the averaged flow from ``z0``.

    Returns ``(time, point)`` or ``None`` if the flow stays inside until ``t_max``.
    """
    z = np.asarray(z0, dtype=float).copy()
    fn = lambda p: averaged_drift_batch(spec, p)
    t = 0.0
    while t < t_max:
        k1 = fn(z)
        k2 = fn(z + 0.5 * dt * k1)
        k3 = fn(z + 0.5 * dt * k2)
        k4 = fn(z + dt * k3)
        zn = z + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(zn)):
            raise FlowDivergenceError("averaged flow diverged")
        if spec.level(zn) >= 0:
            lo, hi = 0.0, 1.0
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if spec.level(z + mid * (zn - z)) < 0:
                    lo = mid
                else:
                    hi = mid
            s = 0.5 * (lo + hi)
            return t + s * dt, z + s * (zn - z)
        z, t = zn, t + dt
    return None


# ---------------------------------------------------------------------------
# Exit profile and assumption checks
# ---------------------------------------------------------------------------


@dataclass
class ExitProfile:
    z_start: np.ndarray
    samples: np.ndarray
    V: np.ndarray
    z_bar: np.ndarray
    index: int
    gap: float
    normal: np.ndarray
    normal_products: np.ndarray
    k0: int
    k0_margin: float
    unique_exit: bool
    unique_mode: bool
    flow_exit_time: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "z_start": self.z_start.tolist(),
            "samples": self.samples.tolist(),
            "V": self.V.tolist(),
            "z_bar": self.z_bar.tolist(),
            "index": self.index,
            "gap": self.gap,
            "normal": self.normal.tolist(),
            "normal_products": self.normal_products.tolist(),
            "k0": self.k0 + 1,
            "k0_margin": self.k0_margin,
            "unique_exit": self.unique_exit,
            "unique_mode": self.unique_mode,
            "flow_exit_time": self.flow_exit_time,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExitProfile":
        return cls(
            z_start=np.asarray(data["z_start"], float),
            samples=np.asarray(data["samples"], float),
            V=np.asarray(data["V"], float),
            z_bar=np.asarray(data["z_bar"], float),
            index=int(data["index"]),
            gap=float(data["gap"]),
            normal=np.asarray(data["normal"], float),
            normal_products=np.asarray(data["normal_products"], float),
            k0=int(data["k0"]) - 1,
            k0_margin=float(data["k0_margin"]),
            unique_exit=bool(data["unique_exit"]),
            unique_mode=bool(data["unique_mode"]),
            flow_exit_time=data.get("flow_exit_time"),
        )


def dominant_mode(spec: ModelSpec, z_bar) -> tuple[int, float, np.ndarray, np.ndarray]:
    """``argmax_k <F_k(z_bar), n(z_bar)>`` with the margin over the runner-up."""
    z_bar = np.asarray(z_bar, dtype=float)
    n = spec.normal(z_bar)
    prods = spec.drifts(z_bar) @ n
    order = np.argsort(-prods, kind="stable")
    margin = float(prods[order[0]] - prods[order[1]]) if spec.K > 1 else math.inf
    return int(order[0]), margin, n, prods


def find_exit_minimizer(spec: ModelSpec, eps: float, deltahat: float, samples,
                        T_grid: Sequence[float], N: int, z_start=None, seed: int = 0,
                        starts: int = 1) -> ExitProfile:
    """Quasipotential over boundary samples and the dominant exit point/mode.

    ``z_start`` defaults to the unique stationary point of the averaged flow.
    If the averaged flow from ``z_start`` leaves G, its exit point has zero
    action and is added to the samples (with its travel time in the grid).
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if z_start is None:
        starts_grid = boundary_samples(spec, 8) * 0.5 + 0.5 * spec.box.mean(axis=1)
        pts = stationary_points(spec, np.vstack([spec.box.mean(axis=1), starts_grid]))
        if len(pts) != 1:
            raise ValueError(f"expected one stationary point, found {len(pts)}; pass z_start")
        z_start = pts[0]
    z_start = np.asarray(z_start, dtype=float)
    T_grid = list(T_grid)
    exit_info = flow_exit(spec, z_start)
    flow_time = None
    if exit_info is not None:
        flow_time, z_flow = exit_info
        samples = np.vstack([samples, z_flow])
        T_grid = sorted(set(T_grid) | {flow_time})
    V = np.empty(len(samples))
    for i, b in enumerate(samples):
        V[i], _ = quasipotential_V(spec, z_start, b, eps, deltahat, T_grid, N,
                                   seed=seed + 101 * i, starts=starts)
    order = np.argsort(V, kind="stable")
    idx = int(order[0])
    gap = float(V[order[1]] - V[idx]) if len(V) > 1 else math.inf
    spread = float(V.max() - V.min())
    unique_exit = len(V) > 1 and gap > 1e-3 * max(spread, 1e-12)
    if not unique_exit:
        warnings.warn("exit minimizer is not unique within tolerance", RuntimeWarning,
                      stacklevel=2)
    z_bar = samples[idx]
    k0, margin, n, prods = dominant_mode(spec, z_bar)
    unique_mode = margin > 1e-9 * max(1.0, float(np.abs(prods).max()))
    if not unique_mode:
        warnings.warn("dominant exit mode is tied", RuntimeWarning, stacklevel=2)
    return ExitProfile(z_start, samples, V, z_bar, idx, gap, n, prods, k0, margin,
                       bool(unique_exit), bool(unique_mode), flow_time)


@dataclass
class AssumptionReport:
    inward: np.ndarray
    inward_products: np.ndarray
    witnesses: list
    stationary: np.ndarray
    samples: np.ndarray

    @property
    def inward_ok(self) -> bool:
        return bool(np.all(self.inward))

    @property
    def unique_stationary(self) -> bool:
        return len(self.stationary) == 1

    def to_dict(self) -> dict:
        return {
            "inward_ok": self.inward_ok,
            "inward_failures": int((~self.inward).sum()),
            "witnesses": self.witnesses,
            "stationary_count": int(len(self.stationary)),
            "stationary": self.stationary.tolist(),
            "unique_stationary": self.unique_stationary,
            "samples": int(len(self.samples)),
        }


def check_assumptions(spec: ModelSpec, samples, interior_starts) -> AssumptionReport:
    """Inward-pointing averaged drift on the boundary and its stationary points."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    Fbar = averaged_drift_batch(spec, samples)
    prods = np.einsum("nd,nd->n", Fbar, spec.normal(samples))
    inward = prods < 0
    wit = [{"z": samples[i].tolist(), "product": float(prods[i])} for i in np.nonzero(~inward)[0]]
    stat = stationary_points(spec, interior_starts)
    return AssumptionReport(inward, prods, wit, stat, samples)
