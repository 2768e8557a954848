"""Large-deviation engine.

For a point ``z``, momentum ``p`` and mode tilts ``alpha`` the Hamiltonian
matrix is the generator ``C(z)`` plus the diagonal

    d_k = p . a_k p / 2 + p . F_k + alpha_k

where ``F_k`` is the stacked drift and ``a_k = blockdiag((deltahat/eps) I_n, a_k)``
the (optionally regularized) diffusion. Its Perron root ``lambda(z, p, alpha)``
is convex in ``(p, alpha)``; the rate functions are its convex conjugates:

* ``eta(z, q, beta)``  - sup over ``(p, alpha)`` (joint position/occupation),
* ``rho(z, q)``        - sup over ``p`` with ``alpha = 0`` (position only),
* ``L(beta)``          - sup over ``alpha`` with ``p = 0`` (occupation only).

All maximizations run batched over many points with a damped Newton method
using the exact Hessian of the Perron root.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .expr import ExprField
from .model import ModelSpec

__all__ = [
    "HamiltonianMatrix",
    "EigenData",
    "PathDiscretization",
    "ActionValue",
    "ConjugateSolution",
    "ConvergenceWarning",
    "h_matrix",
    "principal_eigenvalue",
    "eigen_gradient",
    "legendre_eta",
    "solve_eta",
    "rho",
    "solve_rho",
    "occupation_rate_L",
    "action_S",
    "action_I",
    "action_S_timed",
    "LocalHamiltonian",
    "local_hamiltonian",
]

DIVERGENCE_CAP = 1e4
GRAD_TOL = 1e-9
MAX_ITER = 500
SIMPLEX_TOL = 1e-9
FACE_TOL = 1e-13


class ConvergenceWarning(RuntimeWarning):
    pass


# ---------------------------------------------------------------------------
# Perron data
# ---------------------------------------------------------------------------


def _perron_k2(H):
    a, b = H[..., 0, 0], H[..., 0, 1]
    c, d = H[..., 1, 0], H[..., 1, 1]
    half = 0.5 * (a - d)
    s = np.sqrt(half * half + b * c)
    lam = 0.5 * (a + d) + s
    # lambda - a without cancellation: (lambda - a)(lambda - d) = b c
    lam_a = np.where(half <= 0, s - half, b * c / np.maximum(s + half, 1e-300))
    u = np.stack([b, lam_a], axis=-1)
    v = np.stack([c, lam_a], axis=-1)
    return lam, u, v


def _perron_dense(H):
    w, R = np.linalg.eig(H)
    i = np.argmax(w.real, axis=-1)
    lam = np.take_along_axis(w.real, i[..., None], -1)[..., 0]
    u = np.take_along_axis(R, i[..., None, None], -1)[..., 0].real
    wl, Lm = np.linalg.eig(np.swapaxes(H, -1, -2))
    j = np.argmax(wl.real, axis=-1)
    v = np.take_along_axis(Lm, j[..., None, None], -1)[..., 0].real
    u = u * np.sign(u.sum(axis=-1, keepdims=True))
    v = v * np.sign(v.sum(axis=-1, keepdims=True))
    return lam, u, v


def _perron_power(H, tol=1e-15, max_iter=100000):
    K = H.shape[-1]
    shift = np.abs(np.diagonal(H, axis1=-2, axis2=-1)).max(axis=-1) + 1.0
    A = H + shift[..., None, None] * np.eye(K)
    At = np.swapaxes(A, -1, -2)
    u = np.full(H.shape[:-1], 1.0 / K)
    v = u.copy()
    for it in range(max_iter):
        u_new = np.einsum("...ij,...j->...i", A, u)
        u_new /= u_new.sum(axis=-1, keepdims=True)
        v_new = np.einsum("...ij,...j->...i", At, v)
        v_new /= v_new.sum(axis=-1, keepdims=True)
        delta = max(np.abs(u_new - u).max(), np.abs(v_new - v).max())
        u, v = u_new, v_new
        if delta < tol:
            break
    else:
        raise ArithmeticError("power iteration did not converge")
    Au = np.einsum("...ij,...j->...i", H, u)
    lam = (v * Au).sum(-1) / (v * u).sum(-1)
    return lam, u, v


def _perron(H, method: str = "auto"):
    """Batched Perron root, right/left vectors normalized so ``v . u = 1``."""
    K = H.shape[-1]
    if K == 1:
        lam = H[..., 0, 0]
        one = np.ones(H.shape[:-1])
        return lam, one, one.copy()
    if method == "auto":
        method = "k2" if K == 2 else ("dense" if K <= 8 else "power")
    if method == "k2" and K == 2:
        lam, u, v = _perron_k2(H)
    elif method in ("dense", "k2"):
        lam, u, v = _perron_dense(H)
    elif method == "power":
        lam, u, v = _perron_power(H)
    else:
        raise ValueError(f"unknown method {method!r}")
    u = u / u.sum(axis=-1, keepdims=True)
    v = v / (v * u).sum(axis=-1, keepdims=True)
    return lam, u, v


@dataclass(frozen=True)
class HamiltonianMatrix:
    """Hamiltonian matrix at ``(z, p, alpha)`` plus the data its derivatives need."""

    matrix: np.ndarray
    z: np.ndarray
    p: np.ndarray
    alpha: np.ndarray
    drifts: np.ndarray  # (K, d)
    diffusions: np.ndarray  # (K, d, d)
    ratio: float


@dataclass(frozen=True)
class EigenData:
    lam: float
    u: np.ndarray
    v: np.ndarray


# ---------------------------------------------------------------------------
# Batched local Hamiltonian
# ---------------------------------------------------------------------------


class LocalHamiltonian:
    """Frozen coefficients at a batch of points; evaluates lambda and derivatives.

    ``drifts`` has shape ``(N, K, d)``, ``diffusions`` ``(N, K, d, d)`` and
    ``gen`` (the switching generator, zero row sums) ``(N, K, K)``.
    """

    def __init__(self, drifts, diffusions, gen, method: str = "auto"):
        self.drifts = np.asarray(drifts, dtype=float)
        self.diffusions = np.asarray(diffusions, dtype=float)
        self.gen = np.asarray(gen, dtype=float)
        self.N, self.K, self.d = self.drifts.shape
        self.method = method

    def subset(self, rows=None, modes=None) -> "LocalHamiltonian":
        rows = slice(None) if rows is None else rows
        D, A, C = self.drifts[rows], self.diffusions[rows], self.gen[rows]
        if modes is not None:
            D, A = D[:, modes], A[:, modes]
            C = C[:, modes][:, :, modes]
        return LocalHamiltonian(D, A, C, self.method)

    def jacobian_p(self, p):
        """Rows ``a_k p + F_k``, shape ``(N, K, d)``."""
        return np.einsum("nkij,nj->nki", self.diffusions, p) + self.drifts

    def matrix(self, p, alpha):
        quad = 0.5 * np.einsum("ni,nkij,nj->nk", p, self.diffusions, p)
        lin = np.einsum("nki,ni->nk", self.drifts, p)
        H = self.gen.copy()
        idx = np.arange(self.K)
        H[:, idx, idx] += quad + lin + alpha
        return H

    def perron(self, p, alpha):
        return _perron(self.matrix(p, alpha), self.method)

    def value(self, p, alpha):
        return self.perron(p, alpha)[0]

    def derivatives(self, p, alpha, use_p: bool, n_alpha: int):
        """lambda, gradient and Hessian in ``theta = (p?, alpha[:n_alpha])``."""
        H = self.matrix(p, alpha)
        lam, u, v = _perron(H, self.method)
        w = u * v  # on the simplex
        K = self.K
        cols = []
        if use_p:
            cols.append(self.jacobian_p(p))
        if n_alpha:
            cols.append(np.broadcast_to(np.eye(K)[:, :n_alpha], (self.N, K, n_alpha)))
        J = np.concatenate(cols, axis=-1)  # (N, K, nv)
        grad = np.einsum("nk,nkj->nj", w, J)
        # second-order term via the group inverse of (H - lam I)
        I = np.eye(K)
        uv = u[:, :, None] * v[:, None, :]
        S = np.linalg.inv(H - lam[:, None, None] * I + uv) - uv
        M = v[:, :, None] * S * u[:, None, :]
        G = -(M + np.swapaxes(M, -1, -2))
        hess = np.einsum("nki,nkl,nlj->nij", J, G, J)
        if use_p:
            d = self.d
            hess[:, :d, :d] += np.einsum("nk,nkij->nij", w, self.diffusions)
        return lam, grad, hess, u, v


def local_hamiltonian(spec: ModelSpec, z, eps: float, deltahat: float, t=None,
                      rates: Optional[Mapping[tuple[int, int], ExprField]] = None,
                      method: str = "auto") -> LocalHamiltonian:
    """Freeze the model coefficients at the points ``z`` (shape ``(N, d)``)."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    ratio = deltahat / eps
    drifts = spec.drifts(z)
    diffs = spec.full_diffusion(z, ratio)
    if rates is None:
        gen = spec.rate_matrix(z, 0.0 if t is None else t)
    else:
        tt = 0.0 if t is None else np.asarray(t, dtype=float)
        gen = np.zeros(z.shape[:-1] + (spec.K, spec.K))
        for (k, j), c in rates.items():
            gen[..., k, j] = c.evaluate(z, tt)
        idx = np.arange(spec.K)
        gen[..., idx, idx] = -gen.sum(axis=-1)
    return LocalHamiltonian(drifts, diffs, gen, method)


# ---------------------------------------------------------------------------
# Batched concave maximization
# ---------------------------------------------------------------------------


@dataclass
class _Solve:
    value: np.ndarray
    p: np.ndarray
    alpha: np.ndarray
    converged: np.ndarray
    iterations: int


def _newton_max(loc: LocalHamiltonian, q, beta, use_p: bool, n_alpha: int,
                theta0=None, gtol: float = GRAD_TOL, max_iter: int = MAX_ITER) -> _Solve:
    """Maximize ``q.p + beta.alpha - lambda`` with ``alpha`` past ``n_alpha`` held at 0."""
    N, K, d = loc.N, loc.K, loc.d
    nv = (d if use_p else 0) + n_alpha
    q = np.zeros((N, d)) if q is None else np.asarray(q, dtype=float)
    beta = np.zeros((N, K)) if beta is None else np.asarray(beta, dtype=float)

    def unpack(theta):
        p = theta[:, :d] if use_p else np.zeros((len(theta), d))
        alpha = np.zeros((len(theta), K))
        if n_alpha:
            alpha[:, :n_alpha] = theta[:, nv - n_alpha:]
        return p, alpha

    def objective(sub, theta, rows):
        p, alpha = unpack(theta)
        lam = sub.value(p, alpha)
        return (q[rows] * p).sum(-1) + (beta[rows] * alpha).sum(-1) - lam

    if nv == 0:
        lam = loc.value(np.zeros((N, d)), np.zeros((N, K)))
        return _Solve(-lam, np.zeros((N, d)), np.zeros((N, K)), np.ones(N, bool), 0)

    theta = np.zeros((N, nv)) if theta0 is None else np.array(theta0, dtype=float)
    value = np.full(N, np.nan)
    converged = np.zeros(N, dtype=bool)
    infinite = np.zeros(N, dtype=bool)
    target = np.concatenate(
        ([q] if use_p else []) + ([beta[:, :n_alpha]] if n_alpha else []), axis=-1
    )
    it = 0
    for it in range(1, max_iter + 1):
        act = np.nonzero(~converged & ~infinite)[0]
        if act.size == 0:
            break
        sub = loc.subset(act)
        th = theta[act]
        p, alpha = unpack(th)
        lam, g_lam, hess, _, _ = sub.derivatives(p, alpha, use_p, n_alpha)
        f_val = (q[act] * p).sum(-1) + (beta[act] * alpha).sum(-1) - lam
        grad = target[act] - g_lam  # ascent direction of the objective
        value[act] = f_val
        gnorm = np.abs(grad).max(axis=-1)
        scale = 1.0 + np.abs(target[act]).max(axis=-1) + np.abs(g_lam).max(axis=-1)
        done = gnorm <= gtol * scale
        converged[act[done]] = True
        keep = ~done
        if not keep.any():
            break
        act, th, grad, hess, f_val = act[keep], th[keep], grad[keep], hess[keep], f_val[keep]
        sub = loc.subset(act)
        # damped Newton step on the concave objective (Hessian of -lambda)
        ev, V = np.linalg.eigh(hess)
        floor = 1e-12 * np.maximum(1.0, np.abs(ev).max(axis=-1, keepdims=True))
        ev = np.maximum(ev, floor)
        step = np.einsum("nij,nj->ni", V, np.einsum("nji,nj->ni", V, grad) / ev)
        slope = (grad * step).sum(-1)
        # Newton decrement below rounding level: nothing left to gain
        flat = slope <= 1e-15 * (1.0 + np.abs(f_val))
        converged[act[flat]] = True
        keep = ~flat
        if not keep.any():
            continue
        act, th, grad, step, slope, f_val = act[keep], th[keep], grad[keep], step[keep], slope[keep], f_val[keep]
        sub = loc.subset(act)
        s = np.ones(len(act))
        pending = np.ones(len(act), dtype=bool)
        new_val = f_val.copy()
        for _ in range(40):
            rows = np.nonzero(pending)[0]
            cand = th[rows] + s[rows, None] * step[rows]
            with np.errstate(over="ignore", invalid="ignore"):
                val = objective(sub.subset(rows), cand, act[rows])
            ok = np.isfinite(val) & (val >= f_val[rows] + 1e-4 * s[rows] * slope[rows])
            new_val[rows[ok]] = val[ok]
            pending[rows[ok]] = False
            s[rows[~ok]] *= 0.5
            if not pending.any():
                break
        moved = ~pending
        th_new = th + (s * moved)[:, None] * step
        theta[act] = th_new
        # no ascent found at machine resolution: the current point is optimal
        converged[act[pending]] = True
        value[act[moved]] = new_val[moved]
        big = np.abs(th_new).max(axis=-1) > DIVERGENCE_CAP
        growing = (new_val - f_val) > 1e-6 * np.maximum(1.0, np.abs(f_val))
        infinite[act[big & growing & moved]] = True
    p, alpha = unpack(theta)
    value[infinite] = np.inf
    return _Solve(value, p, alpha, converged | infinite, it)


# ---------------------------------------------------------------------------
# Public single-point operations
# ---------------------------------------------------------------------------


def h_matrix(spec: ModelSpec, z, p, alpha, eps: float, deltahat: float = 0.0) -> HamiltonianMatrix:
    z = np.asarray(z, dtype=float)
    p = np.asarray(p, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if p.shape != (spec.d,) or alpha.shape != (spec.K,) or z.shape != (spec.d,):
        raise ValueError("dimension mismatch between z, p, alpha and the model")
    if deltahat < 0:
        raise ValueError("deltahat must be non-negative")
    loc = local_hamiltonian(spec, z[None], eps, deltahat)
    H = loc.matrix(p[None], alpha[None])[0]
    return HamiltonianMatrix(H, z, p, alpha, loc.drifts[0], loc.diffusions[0], deltahat / eps)


def principal_eigenvalue(H: HamiltonianMatrix | np.ndarray, method: str = "auto") -> EigenData:
    M = H.matrix if isinstance(H, HamiltonianMatrix) else np.asarray(H, dtype=float)
    K = M.shape[-1]
    off = ~np.eye(K, dtype=bool)
    if K > 1 and not np.all(M[off] > 0):
        raise ValueError("matrix is not Metzler with positive off-diagonal entries")
    lam, u, v = _perron(M[None], method)
    return EigenData(float(lam[0]), u[0], v[0])


def eigen_gradient(H: HamiltonianMatrix, eig: EigenData, which: str = "p") -> np.ndarray:
    """Hellmann-Feynman derivative ``v (dH/dtheta) u`` with ``v . u = 1``."""
    norm = float(eig.v @ eig.u)
    if not norm > 0:
        raise ArithmeticError("degenerate eigenvector normalization")
    w = eig.u * eig.v / norm
    if which == "alpha":
        return w
    if which == "p":
        rows = np.einsum("kij,j->ki", H.diffusions, H.p) + H.drifts
        return w @ rows
    raise ValueError("which must be 'p' or 'alpha'")


@dataclass(frozen=True)
class ConjugateSolution:
    value: float
    p: np.ndarray
    alpha: np.ndarray
    converged: bool

    @property
    def finite(self) -> bool:
        return math.isfinite(self.value)


def _warn_unconverged(conv):
    if not np.all(conv):
        warnings.warn(
            f"conjugate maximization hit the iteration cap at {int((~conv).sum())} point(s); "
            "values are lower bounds",
            ConvergenceWarning,
            stacklevel=3,
        )


def _on_simplex(beta) -> np.ndarray:
    beta = np.atleast_2d(beta)
    return (np.abs(beta.sum(-1) - 1.0) <= SIMPLEX_TOL) & np.all(beta >= -FACE_TOL, axis=-1)


def eta_batch(loc: LocalHamiltonian, q, beta, theta0=None) -> _Solve:
    """Batched ``eta`` with exact handling of simplex faces.

    Modes with ``beta_k = 0`` are dropped: sending their tilt to minus
    infinity decouples them, leaving the Perron root of the submatrix on the
    support (whose diagonal still carries the full leaving rates).
    """
    N, K, d = loc.N, loc.K, loc.d
    q = np.asarray(q, dtype=float)
    beta = np.asarray(beta, dtype=float)
    value = np.full(N, np.inf)
    p_out = np.zeros((N, d))
    a_out = np.zeros((N, K))
    conv = np.ones(N, dtype=bool)
    ok = _on_simplex(beta)
    support = beta > FACE_TOL
    patterns = {}
    for i in np.nonzero(ok)[0]:
        patterns.setdefault(tuple(support[i]), []).append(i)
    iters = 0
    for pat, rows in sorted(patterns.items()):
        rows = np.asarray(rows)
        modes = np.nonzero(pat)[0]
        sub = loc.subset(rows, modes)
        b = beta[rows][:, modes]
        b = b / b.sum(-1, keepdims=True)
        t0 = None
        if theta0 is not None:
            t0 = np.concatenate([theta0[rows, :d], theta0[rows][:, d + modes[:-1]]], axis=-1)
        sol = _newton_max(sub, q[rows], b, True, len(modes) - 1, t0)
        value[rows] = sol.value
        p_out[rows] = sol.p
        a_full = np.zeros((len(rows), K))
        a_full[:, modes] = sol.alpha
        a_out[rows] = a_full
        conv[rows] = sol.converged
        iters = max(iters, sol.iterations)
    return _Solve(value, p_out, a_out, conv, iters)


def rho_batch(loc: LocalHamiltonian, q, theta0=None) -> _Solve:
    return _newton_max(loc, q, None, True, 0, theta0)


def solve_eta(spec: ModelSpec, z, q, beta, eps: float, deltahat: float = 0.0) -> ConjugateSolution:
    loc = local_hamiltonian(spec, np.asarray(z, dtype=float)[None], eps, deltahat)
    sol = eta_batch(loc, np.asarray(q, dtype=float)[None], np.asarray(beta, dtype=float)[None])
    _warn_unconverged(sol.converged)
    return ConjugateSolution(float(sol.value[0]), sol.p[0], sol.alpha[0], bool(sol.converged[0]))


def legendre_eta(spec: ModelSpec, z, q, beta, eps: float, deltahat: float = 0.0) -> float:
    """``sup_{p, alpha} [q.p + beta.alpha - lambda(z, p, alpha)]``; ``inf`` off the simplex."""
    return solve_eta(spec, z, q, beta, eps, deltahat).value


def solve_rho(spec: ModelSpec, z, q, eps: float, deltahat: float = 0.0) -> ConjugateSolution:
    loc = local_hamiltonian(spec, np.asarray(z, dtype=float)[None], eps, deltahat)
    sol = rho_batch(loc, np.asarray(q, dtype=float)[None])
    _warn_unconverged(sol.converged)
    return ConjugateSolution(float(sol.value[0]), sol.p[0], sol.alpha[0], bool(sol.converged[0]))


def rho(spec: ModelSpec, z, q, eps: float, deltahat: float = 0.0) -> float:
    """``sup_p [q.p - lambda(z, p, 0)]``.

    With ``deltahat = 0`` and a slow block the diffusion is degenerate and the
    value is infinite unless the slow velocity matches ``F``.
    """
    return solve_rho(spec, z, q, eps, deltahat).value


def occupation_rate_L(spec: ModelSpec, beta) -> float:
    """Occupation rate ``sup_alpha [beta.alpha - lambda(0, alpha)]`` for constant rates."""
    if not spec.constant_rates:
        raise ValueError("occupation_rate_L needs constant switching rates")
    z = spec.box.mean(axis=1)[None]
    C = spec.rate_matrix(z)
    K = spec.K
    loc = LocalHamiltonian(np.zeros((1, K, spec.d)), np.zeros((1, K, spec.d, spec.d)), C)
    beta = np.asarray(beta, dtype=float)[None]
    if not _on_simplex(beta)[0]:
        return math.inf
    modes = np.nonzero(beta[0] > FACE_TOL)[0]
    sub = loc.subset(None, modes)
    b = beta[:, modes] / beta[:, modes].sum()
    sol = _newton_max(sub, None, b, False, len(modes) - 1)
    _warn_unconverged(sol.converged)
    return float(sol.value[0])


# ---------------------------------------------------------------------------
# Paths and action functionals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PathDiscretization:
    """Time grid, positions and (optionally) cumulative occupation times."""

    times: np.ndarray
    positions: np.ndarray
    occupation: Optional[np.ndarray] = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        x = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if x.shape[0] != t.size:
            x = x.reshape(t.size, -1)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "positions", x)
        if t.size < 1 or t[0] != 0 or np.any(np.diff(t) <= 0):
            raise ValueError("times must start at 0 and increase strictly")
        if self.occupation is not None:
            mu = np.atleast_2d(np.asarray(self.occupation, dtype=float))
            object.__setattr__(self, "occupation", mu)
            if mu.shape[0] != t.size:
                raise ValueError("occupation must have one row per time node")
            if np.any(np.abs(mu[0]) > 1e-12):
                raise ValueError("occupation must start at 0")
            if np.any(np.diff(mu, axis=0) < -1e-12):
                raise ValueError("occupation profile must be non-decreasing")
            if np.any(np.abs(mu.sum(axis=1) - t) > 1e-9 * (1 + t)):
                raise ValueError("occupation components must sum to t")

    @property
    def T(self) -> float:
        return float(self.times[-1])

    def segments(self):
        dt = np.diff(self.times)
        mid = 0.5 * (self.positions[1:] + self.positions[:-1])
        vel = np.diff(self.positions, axis=0) / dt[:, None]
        occ = None
        if self.occupation is not None:
            occ = np.diff(self.occupation, axis=0) / dt[:, None]
        tmid = 0.5 * (self.times[1:] + self.times[:-1])
        return dt, mid, vel, occ, tmid


@dataclass(frozen=True)
class ActionValue:
    value: float
    segments: np.ndarray
    finite: bool
    converged: bool = True


def _action(values, dt, conv) -> ActionValue:
    contrib = values * dt
    finite = bool(np.all(np.isfinite(contrib)))
    total = float(contrib.sum()) if finite else math.inf
    return ActionValue(max(total, 0.0) if finite else math.inf, contrib, finite, bool(np.all(conv)))


def action_S(spec: ModelSpec, path: PathDiscretization, eps: float, deltahat: float = 0.0) -> ActionValue:
    """Joint path/occupation action: midpoint ``z``, forward-difference velocities."""
    if path.occupation is None:
        raise ValueError("action_S needs an occupation profile")
    if path.times.size < 2:
        return ActionValue(0.0, np.zeros(0), True)
    dt, mid, vel, occ, _ = path.segments()
    loc = local_hamiltonian(spec, mid, eps, deltahat)
    sol = eta_batch(loc, vel, occ)
    _warn_unconverged(sol.converged)
    return _action(sol.value, dt, sol.converged)


def action_I(spec: ModelSpec, path: PathDiscretization, eps: float, deltahat: float = 0.0) -> ActionValue:
    """Position-only action built from ``rho``."""
    if path.times.size < 2:
        return ActionValue(0.0, np.zeros(0), True)
    dt, mid, vel, _, _ = path.segments()
    loc = local_hamiltonian(spec, mid, eps, deltahat)
    sol = rho_batch(loc, vel)
    _warn_unconverged(sol.converged)
    return _action(sol.value, dt, sol.converged)


def action_S_timed(spec: ModelSpec, path: PathDiscretization,
                   schedule: Mapping[tuple[int, int], ExprField], eps: float,
                   deltahat: float = 0.0) -> ActionValue:
    """Joint action with switching rates replaced by a time schedule ``c_km(t)``."""
    if path.occupation is None:
        raise ValueError("action_S_timed needs an occupation profile")
    if path.times.size < 2:
        return ActionValue(0.0, np.zeros(0), True)
    dt, mid, vel, occ, tmid = path.segments()
    loc = local_hamiltonian(spec, mid, eps, deltahat, t=tmid, rates=schedule)
    off = ~np.eye(spec.K, dtype=bool)
    if spec.K > 1 and not np.all(loc.gen[:, off] > 0):
        raise ValueError("rate schedule must be positive on [0, T]")
    sol = eta_batch(loc, vel, occ)
    _warn_unconverged(sol.converged)
    return _action(sol.value, dt, sol.converged)


# ---------------------------------------------------------------------------
# Invariant suite
# ---------------------------------------------------------------------------


def _interior_points(spec: ModelSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    out = np.empty((0, spec.d))
    while len(out) < count:
        cand = rng.uniform(spec.box[:, 0], spec.box[:, 1], size=(4 * count, spec.d))
        out = np.vstack([out, cand[spec.inside(cand)]])
    return out[:count]


def _simplex_min(loc1: LocalHamiltonian, q, K: int) -> float:
    """``min_beta eta`` by a dense grid (K = 2) or a grid seeded local search."""
    from scipy.optimize import minimize as _minimize

    if K == 1:
        return float(eta_batch(loc1, q[None], np.ones((1, 1))).value[0])
    if K == 2:
        b = np.linspace(0.0, 1.0, 401)
        betas = np.stack([b, 1 - b], axis=1)
    else:
        betas = np.random.default_rng(0).dirichlet(np.ones(K), size=400)
    n = len(betas)
    loc = LocalHamiltonian(np.repeat(loc1.drifts, n, 0), np.repeat(loc1.diffusions, n, 0),
                           np.repeat(loc1.gen, n, 0))
    vals = eta_batch(loc, np.repeat(q[None], n, 0), betas).value
    i = int(np.argmin(vals))
    best = float(vals[i])

    def f(x):
        w = np.exp(x - x.max())
        w /= w.sum()
        return float(eta_batch(loc1, q[None], w[None]).value[0])

    x0 = np.log(np.maximum(betas[i], 1e-12))
    res = _minimize(f, x0, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-12,
                                                         "maxiter": 4000})
    return min(best, float(res.fun))


def invariant_suite(spec: ModelSpec, eps: float, deltahat: float, samples: int = 1000,
                    seed: int = 0, infimum_samples: int = 10) -> dict:
    """Randomized checks of the structural identities of ``lambda`` and its conjugates."""
    rng = np.random.default_rng(seed)
    d, K = spec.d, spec.K
    z = _interior_points(spec, samples, rng)
    loc = local_hamiltonian(spec, z, eps, deltahat)
    p1, p2 = rng.normal(size=(2, samples, d))
    a1, a2 = rng.normal(size=(2, samples, K))
    report: dict[str, dict] = {}

    lam1, lam2 = loc.value(p1, a1), loc.value(p2, a2)
    mid = loc.value(0.5 * (p1 + p2), 0.5 * (a1 + a2))
    viol = mid - 0.5 * (lam1 + lam2)
    report["convexity"] = {"max_violation": float(viol.max()), "passed": bool(np.all(viol <= 1e-9))}

    c = rng.normal(size=samples) * 3
    shifted = loc.value(p1, a1 + c[:, None])
    err = np.abs(shifted - (lam1 + c))
    report["gauge"] = {"max_error": float(err.max()),
                       "passed": bool(np.all(err <= 1e-12 * (1 + np.abs(lam1) + np.abs(c))))}

    lam, u, v = loc.perron(p1, a1)
    H = loc.matrix(p1, a1)
    ru = np.abs(np.einsum("nij,nj->ni", H, u) - lam[:, None] * u).max(-1)
    rv = np.abs(np.einsum("ni,nij->nj", v, H) - lam[:, None] * v).max(-1)
    scale = 1 + np.abs(H).max(axis=(1, 2))
    report["perron"] = {
        "min_entry": float(min(u.min(), v.min())),
        "max_residual": float(max((ru / scale).max(), (rv / scale).max())),
        "passed": bool(np.all(u > 0) and np.all(v > 0) and np.all(ru <= 1e-10 * scale)
                       and np.all(rv <= 1e-10 * scale)),
    }

    q = rng.normal(size=(samples, d))
    beta = rng.dirichlet(np.ones(K), size=samples)
    eta = eta_batch(loc, q, beta).value
    fy = eta - ((q * p1).sum(-1) + (beta * a1).sum(-1) - lam1)
    report["fenchel_young"] = {"min_gap": float(fy.min()), "passed": bool(np.all(fy >= -1e-8))}

    from .switching import stationary_weights

    fbar = np.einsum("nk,nkd->nd", stationary_weights(loc.gen), loc.drifts)
    r0 = rho_batch(loc, fbar).value
    m = min(10, samples)
    pert = fbar[:m] + 0.1 * rng.normal(size=(m, d))
    rp = rho_batch(loc.subset(np.arange(m)), pert).value
    report["rho_zero"] = {
        "max_at_fbar": float(np.abs(r0).max()),
        "min_perturbed": float(rp.min()),
        "passed": bool(np.all(np.abs(r0) <= 1e-6) and np.all(rp > 1e-6) and np.all(r0 >= -1e-12)),
    }

    n_inf = min(infimum_samples, samples)
    gaps = []
    for i in range(n_inf):
        sub = loc.subset(np.array([i]))
        r = float(rho_batch(sub, q[i:i + 1]).value[0])
        e = _simplex_min(sub, q[i], K)
        gaps.append(e - r)
    gaps = np.array(gaps)
    report["partial_infimum"] = {"max_abs_gap": float(np.abs(gaps).max()) if n_inf else 0.0,
                                 "passed": bool(np.all(np.abs(gaps) <= 1e-3))}
    report["passed"] = all(v["passed"] for v in report.values() if isinstance(v, dict))
    return report
