"""Finite differences for the coupled Dirichlet system of the switching diffusion.

For each mode ``k`` the unknown ``u_k`` solves

    F_k . grad u_k + (eps/2) tr(a_k hess u_k) + (1/eps) sum_j c_kj (u_j - u_k) = 0

in G with ``u_k = g_k`` on the boundary, where the slow block of ``a_k`` is
``deltahat/eps`` (so the slow diffusion is ``deltahat/2``). Each axis uses
an exponentially fitted (Scharfetter-Gummel) stencil by default, or plain
first-order upwinding where a positive velocity takes the forward neighbor.
Both keep every off-diagonal coefficient of a row non-negative, so the
negated operator is an M-matrix (discrete maximum principle).
"""
from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import RegularGridInterpolator

from .model import ModelSpec
from .simulate import SimConfig, batch_exit_mc

__all__ = [
    "GridError",
    "MaximumPrincipleError",
    "SolveConfig",
    "Grid",
    "PDEField",
    "LinearSystem",
    "SweepRow",
    "make_grid",
    "assemble_system",
    "solve_dirichlet",
    "mc_representation",
    "limit_sweep",
]

log = logging.getLogger(__name__)

INTERIOR, BOUNDARY, EXTERIOR = 0, 1, 2
MAX_DIM = 3
PAD = 2


class GridError(ValueError):
    pass


class MaximumPrincipleError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SolveConfig:
    """PDE parameters; ``deltahat=None`` means ``eps**2``."""

    eps: float
    deltahat: Optional[float] = None
    h: float = 0.01
    tol: float = 1e-10
    max_iter: int = 5000
    method: str = "direct"
    scheme: str = "fitted"

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.deltahat is not None and self.deltahat <= 0:
            raise ValueError("deltahat must be positive for the PDE solve")
        if self.h <= 0:
            raise ValueError("h must be positive")
        if self.method not in ("direct", "gmres", "bicgstab"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.scheme not in ("fitted", "upwind"):
            raise ValueError(f"unknown scheme {self.scheme!r}")

    @property
    def dh(self) -> float:
        return self.eps ** 2 if self.deltahat is None else self.deltahat


@dataclass
class Grid:
    """Lattice over the padded box with interior/boundary/exterior labels."""

    axes: tuple[np.ndarray, ...]
    h: np.ndarray
    kind: np.ndarray  # labels, shape = lattice shape
    points: np.ndarray  # (P, d) all nodes, C order
    boundary_points: np.ndarray  # projections onto phi_G = 0 for boundary nodes

    @property
    def shape(self) -> tuple[int, ...]:
        return self.kind.shape

    @property
    def d(self) -> int:
        return len(self.axes)

    def flat(self, kind: int) -> np.ndarray:
        return np.flatnonzero(self.kind.ravel() == kind)


def _project(spec: ModelSpec, z: np.ndarray, iters: int = 20) -> np.ndarray:
    """Move points onto ``phi_G = 0`` by Newton steps along the gradient."""
    z = z.copy()
    for _ in range(iters):
        phi = spec.level(z)
        g = spec.level_gradient(z)
        n2 = (g * g).sum(-1)
        ok = n2 > 1e-24
        z[ok] -= (phi[ok] / n2[ok])[:, None] * g[ok]
    return z


def make_grid(spec: ModelSpec, h: float | Sequence[float]) -> Grid:
    d = spec.d
    if d > MAX_DIM:
        raise GridError(f"total dimension {d} exceeds the supported {MAX_DIM}")
    hv = np.broadcast_to(np.asarray(h, dtype=float), (d,)).copy()
    axes = []
    for i in range(d):
        lo, hi = spec.box[i]
        n = int(math.ceil((hi - lo) / hv[i] - 1e-9))
        axes.append(lo + hv[i] * np.arange(-PAD, n + PAD + 1))
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    shape = mesh[0].shape
    inside = (spec.level(pts) < 0).reshape(shape)
    # the outer pad must be outside G so stencils never leave the lattice
    edge = np.zeros(shape, dtype=bool)
    for i in range(d):
        sl = [slice(None)] * d
        sl[i] = slice(0, 1)
        edge[tuple(sl)] = True
        sl[i] = slice(-1, None)
        edge[tuple(sl)] = True
    if np.any(inside & edge):
        raise GridError("domain reaches the edge of the padded box")
    near = np.zeros(shape, dtype=bool)
    for off in itertools.product((-1, 0, 1), repeat=d):
        near |= np.roll(inside, off, axis=tuple(range(d)))
    kind = np.full(shape, EXTERIOR, dtype=np.int8)
    kind[near] = BOUNDARY
    kind[inside] = INTERIOR
    bidx = np.flatnonzero(kind.ravel() == BOUNDARY)
    bpts = _project(spec, pts[bidx]) if bidx.size else np.zeros((0, d))
    return Grid(tuple(axes), hv, kind, pts, bpts)


@dataclass
class LinearSystem:
    """``A u = b`` over interior unknowns ordered ``(mode, node)``.

    ``A`` is the negated operator with boundary columns moved to ``b``.
    ``operator`` (full, including boundary columns) acts on all nodes.
    """

    A: sp.csr_matrix
    b: np.ndarray
    interior: np.ndarray
    boundary: np.ndarray
    g: np.ndarray  # (K, n_boundary)
    operator: sp.csr_matrix
    cross_terms: bool
    diag_dominant: bool


def _coefficients(spec: ModelSpec, pts: np.ndarray, eps: float, dh: float):
    drifts = spec.drifts(pts)  # (P, K, d)
    diff = spec.full_diffusion(pts, dh / eps)  # (P, K, d, d)
    C = spec.rate_matrix(pts)  # (P, K, K)
    return drifts, diff, C


def _bernoulli(x):
    """``x / (exp(x) - 1)`` with the removable singularity at 0 filled in."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = np.abs(x) < 1e-6
    xs = x[small]
    out[small] = 1.0 - 0.5 * xs + xs * xs / 12.0
    xl = x[~small]
    out[~small] = xl / np.expm1(xl)
    return out


def _axis_weights(diff, F, h, scheme):
    """Neighbor weights for ``diff u'' + F u'`` along one axis.

    ``upwind``: centered diffusion plus one-sided advection toward the
    velocity. ``fitted``: exponential fitting with the Bernoulli function,
    centered at small cell Peclet numbers and upwind at large ones. Both give
    non-negative weights.
    """
    if scheme == "upwind":
        a = diff / h ** 2
        return a + np.maximum(F, 0.0) / h, a + np.maximum(-F, 0.0) / h
    fwd = np.maximum(F, 0.0) / h
    bwd = np.maximum(-F, 0.0) / h
    pos = diff > 0
    pe = np.zeros_like(F)
    pe[pos] = F[pos] * h / diff[pos]
    a = diff / h ** 2
    fwd = np.where(pos, a * _bernoulli(-pe), fwd)
    bwd = np.where(pos, a * _bernoulli(pe), bwd)
    return fwd, bwd


def assemble_system(spec: ModelSpec, grid: Grid, cfg: SolveConfig) -> LinearSystem:
    eps, dh, d, K = cfg.eps, cfg.dh, spec.d, spec.K
    shape = grid.shape
    P = grid.points.shape[0]
    inter = grid.flat(INTERIOR)
    bnd = grid.flat(BOUNDARY)
    strides = np.array([int(np.prod(shape[i + 1:])) for i in range(d)])
    drifts, diff, C = _coefficients(spec, grid.points[inter], eps, dh)
    kinds = grid.kind.ravel()

    rows, cols, vals = [], [], []

    def add(k_row, nodes_row, k_col, nodes_col, v):
        rows.append(k_row * P + nodes_row)
        cols.append(k_col * P + nodes_col)
        vals.append(v)

    cross = False
    for k in range(K):
        diag = np.zeros(inter.size)
        for i in range(d):
            hi = grid.h[i]
            up, dn = inter + strides[i], inter - strides[i]
            fwd, bwd = _axis_weights(0.5 * eps * diff[:, k, i, i], drifts[:, k, i], hi,
                                     cfg.scheme)
            add(k, inter, k, up, fwd)
            add(k, inter, k, dn, bwd)
            diag -= fwd + bwd
            for j in range(i + 1, d):
                c = diff[:, k, i, j]
                if np.any(c != 0):
                    cross = True
                    w = eps * c / (4 * hi * grid.h[j])
                    sj = strides[j]
                    add(k, inter, k, inter + strides[i] + sj, w)
                    add(k, inter, k, inter - strides[i] - sj, w)
                    add(k, inter, k, inter + strides[i] - sj, -w)
                    add(k, inter, k, inter - strides[i] + sj, -w)
        for j in range(K):
            if j != k:
                rate = C[:, k, j] / eps
                add(k, inter, j, inter, rate)
                diag -= rate
        add(k, inter, k, inter, diag)

    r = np.concatenate(rows)
    c = np.concatenate(cols)
    v = np.concatenate(vals)
    col_nodes = c % P
    if np.any(kinds[col_nodes] == EXTERIOR):
        raise GridError("an interior stencil reaches an exterior cell")
    L = sp.csr_matrix((v, (r, c)), shape=(K * P, K * P))
    L.sum_duplicates()

    unk = np.concatenate([k * P + inter for k in range(K)])
    bcol = np.concatenate([k * P + bnd for k in range(K)])
    g = np.stack([spec.boundary_value(grid.boundary_points, k) * np.ones(bnd.size)
                  for k in range(K)]) if bnd.size else np.zeros((K, 0))
    Lu = L[unk][:, unk]
    Lb = L[unk][:, bcol]
    A = (-Lu).tocsr()
    b = Lb @ g.ravel()
    off = abs(A - sp.diags(A.diagonal())).sum(axis=1).A1
    dominant = (not cross) and bool(np.all(A.diagonal() >= off * (1 - 1e-12)))
    return LinearSystem(A, b, inter, bnd, g, L, cross, dominant)


@dataclass
class PDEField:
    grid: Grid
    values: np.ndarray  # (K, *shape), NaN on exterior cells
    residual: float
    iterations: int
    g_min: float
    g_max: float
    wall_time: float = 0.0

    def value_at(self, z, k: int) -> float:
        """Multilinear interpolation, nearest valid node where corners are missing."""
        z = np.asarray(z, dtype=float)
        vals = self.values[k]
        interp = RegularGridInterpolator(self.grid.axes, vals, bounds_error=True)
        out = float(interp(z[None])[0])
        if math.isfinite(out):
            return out
        idx = tuple(int(round((z[i] - ax[0]) / self.grid.h[i])) for i, ax in enumerate(self.grid.axes))
        return float(vals[idx])

    def node_values(self, k: int) -> np.ndarray:
        v = self.values[k].ravel()
        return v[~np.isnan(v)]


def _solve(A, b, cfg: SolveConfig):
    if cfg.method == "direct":
        return spla.spsolve(A.tocsc(), b), 1
    ilu = spla.spilu(A.tocsc(), drop_tol=1e-5, fill_factor=20)
    M = spla.LinearOperator(A.shape, ilu.solve)
    count = [0]

    def cb(_):
        count[0] += 1

    solver = spla.gmres if cfg.method == "gmres" else spla.bicgstab
    kw = {"callback": cb}
    if cfg.method == "gmres":
        kw["callback_type"] = "pr_norm"
    x, info = solver(A, b, M=M, rtol=cfg.tol, atol=0.0, maxiter=cfg.max_iter, **kw)
    if info != 0:
        raise ArithmeticError(f"iterative solver did not converge (info={info})")
    return x, count[0]


def solve_dirichlet(spec: ModelSpec, cfg: SolveConfig, grid: Optional[Grid] = None) -> PDEField:
    t0 = time.perf_counter()
    grid = make_grid(spec, cfg.h) if grid is None else grid
    system = assemble_system(spec, grid, cfg)
    x, iters = _solve(system.A, system.b, cfg)
    res = float(np.linalg.norm(system.A @ x - system.b) / max(np.linalg.norm(system.b), 1e-300))
    if res > max(cfg.tol, 1e-8) * 10:
        raise ArithmeticError(f"linear solve residual {res:.3g} above tolerance")
    K = spec.K
    n_int, n_bnd = system.interior.size, system.boundary.size
    vals = np.full((K, grid.points.shape[0]), np.nan)
    xi = x.reshape(K, n_int)
    for k in range(K):
        vals[k, system.interior] = xi[k]
        vals[k, system.boundary] = system.g[k]
    g_min = float(system.g.min()) if n_bnd else 0.0
    g_max = float(system.g.max()) if n_bnd else 0.0
    if n_int:
        lo, hi = float(xi.min()), float(xi.max())
        if lo < g_min - 1e-8 or hi > g_max + 1e-8:
            raise MaximumPrincipleError(
                f"solution range [{lo:.12g}, {hi:.12g}] leaves [{g_min:.12g}, {g_max:.12g}]"
            )
    return PDEField(grid, vals.reshape((K,) + grid.shape), res, iters, g_min, g_max,
                    time.perf_counter() - t0)


def mc_representation(spec: ModelSpec, cfg: SolveConfig, z, k: int, trials: int, seed: int,
                      dt: Optional[float] = None, t_max: float = 50.0,
                      workers: int = 1) -> tuple[float, float]:
    """Mean of ``g_{mode at exit}(exit point)`` over simulated trajectories from ``(z, k)``."""
    z = np.asarray(z, dtype=float)
    if not spec.inside(z):
        raise ValueError("probe must lie inside G")
    sim = SimConfig(eps=cfg.eps, deltahat=cfg.dh, dt=cfg.eps / 20 if dt is None else dt,
                    t_max=t_max, seed=seed, trials=trials, stream="dirichlet-mc",
                    shards=max(1, workers), workers=workers)
    stats = batch_exit_mc(spec, sim, z, k)
    ok = ~stats.censored
    payoff = np.empty(ok.sum())
    zs, modes = stats.z[ok], stats.mode[ok]
    for j in range(spec.K):
        sel = modes == j
        if sel.any():
            payoff[sel] = spec.boundary_value(zs[sel], j) * np.ones(sel.sum())
    n = payoff.size
    if n > 1 and np.ptp(payoff) == 0:
        return float(payoff[0]), 0.0
    se = float(payoff.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    return float(payoff.mean()), se


@dataclass
class SweepRow:
    eps: float
    deltahat: float
    h: float
    values: list[float]
    deviations: list[float]
    spread: float
    residual: float

    def to_dict(self) -> dict:
        return {
            "eps": self.eps,
            "deltahat": self.deltahat,
            "h": self.h,
            "values": self.values,
            "deviations": self.deviations,
            "spread": self.spread,
            "residual": self.residual,
        }


def limit_sweep(spec: ModelSpec, cfg_base: SolveConfig, eps_list: Sequence[float], z_probe,
                expected: Optional[float] = None,
                cells_per_eps: Optional[float] = 10.0) -> list[SweepRow]:
    """``u_k^eps(z_probe)`` for each eps in a decreasing list.

    ``deltahat`` is ``eps^2`` unless ``cfg_base`` fixes it, in which case it is
    scaled by ``(eps / eps_0)^2``. The spacing is ``min(h, eps / cells_per_eps)``
    so the O(eps) exit layer gets the same resolution at every eps.
    """
    eps_list = [float(e) for e in eps_list]
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be strictly decreasing")
    rows = []
    for e in eps_list:
        h = cfg_base.h if cells_per_eps is None else min(cfg_base.h, e / cells_per_eps)
        dh = None if cfg_base.deltahat is None else cfg_base.deltahat * (e / eps_list[0]) ** 2
        cfg = SolveConfig(e, dh, h, cfg_base.tol, cfg_base.max_iter, cfg_base.method,
                          cfg_base.scheme)
        fld = solve_dirichlet(spec, cfg)
        vals = [fld.value_at(z_probe, k) for k in range(spec.K)]
        dev = [abs(v - expected) if expected is not None else math.nan for v in vals]
        rows.append(SweepRow(e, cfg.dh, h, vals, dev, float(max(vals) - min(vals)), fld.residual))
        log.info("sweep eps=%g h=%g values=%s", e, h, vals)
    return rows
