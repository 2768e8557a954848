"""Mode-switching algebra: generator, invariant weights, averaged flow."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ModelSpec

__all__ = [
    "SwitchingError",
    "FlowDivergenceError",
    "GeneratorMatrix",
    "InvariantWeights",
    "FlowPath",
    "generator_at",
    "invariant_weights",
    "stationary_weights",
    "averaged_drift",
    "averaged_drift_batch",
    "integrate_averaged",
]

RESIDUAL_TOL = 1e-10
DIVERGENCE_NORM = 1e6


class SwitchingError(ArithmeticError):
    pass


class FlowDivergenceError(ArithmeticError):
    pass


@dataclass(frozen=True)
class GeneratorMatrix:
    matrix: np.ndarray
    z: np.ndarray

    @property
    def K(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class InvariantWeights:
    weights: np.ndarray
    residual: float


@dataclass(frozen=True)
class FlowPath:
    times: np.ndarray
    positions: np.ndarray
    dt: float

    @property
    def end(self) -> np.ndarray:
        return self.positions[-1]


def generator_at(spec: ModelSpec, z, t: float = 0.0) -> GeneratorMatrix:
    z = np.asarray(z, dtype=float)
    C = spec.rate_matrix(z, t)
    off = ~np.eye(spec.K, dtype=bool)
    if spec.K > 1 and not np.all(C[off] > 0):
        raise SwitchingError(f"non-positive switching rate at z={z.tolist()}")
    return GeneratorMatrix(C, z)


def invariant_weights(gen: GeneratorMatrix) -> InvariantWeights:
    """Left null vector of the generator normalized onto the simplex.

    Solved as the least-squares system ``[C^T; 1^T] w = [0; 1]``.
    """
    C = np.asarray(gen.matrix, dtype=float)
    K = C.shape[0]
    A = np.vstack([C.T, np.ones((1, K))])
    b = np.zeros(K + 1)
    b[-1] = 1.0
    w, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    if rank < K:
        raise SwitchingError("generator is reducible; invariant weights are not unique")
    residual = float(np.linalg.norm(w @ C))
    scale = max(1.0, float(np.abs(C).max()))
    if residual > RESIDUAL_TOL * scale or np.any(w <= 0):
        raise SwitchingError(
            f"generator has no strictly positive invariant vector (residual {residual:.3g})"
        )
    return InvariantWeights(w, residual)


def stationary_weights(C: np.ndarray) -> np.ndarray:
    """Batched invariant weights for generators of shape ``(..., K, K)``.

    Replaces the last column of ``C`` by ones and solves ``w A = e_K``,
    which has the same unique solution as the least-squares form.
    """
    C = np.asarray(C, dtype=float)
    K = C.shape[-1]
    if K == 1:
        return np.ones(C.shape[:-1])
    A = C.copy()
    A[..., :, -1] = 1.0
    rhs = np.zeros(C.shape[:-1])
    rhs[..., -1] = 1.0
    At = np.swapaxes(A, -1, -2)
    return np.linalg.solve(At, rhs[..., None])[..., 0]


def averaged_drift(spec: ModelSpec, z) -> np.ndarray:
    """``sum_k w_k(z) F_k(z)`` for a single point."""
    z = np.asarray(z, dtype=float)
    w = invariant_weights(generator_at(spec, z)).weights
    return w @ spec.drifts(z)


def averaged_drift_batch(spec: ModelSpec, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    w = stationary_weights(spec.rate_matrix(z))
    return np.einsum("...k,...kd->...d", w, spec.drifts(z))


def integrate_averaged(spec: ModelSpec, z0, T: float, dt: float) -> FlowPath:
    """Classical RK4 integration of the averaged vector field.

    The step is shrunk so that an integer number of steps lands on ``T``.
    """
    if T <= 0 or dt <= 0:
        raise ValueError("T and dt must be positive")
    steps = max(1, math.ceil(T / dt - 1e-9))
    h = T / steps
    z = np.asarray(z0, dtype=float).copy()
    out = np.empty((steps + 1, z.size))
    out[0] = z
    field = lambda p: averaged_drift_batch(spec, p)
    for i in range(steps):
        k1 = field(z)
        k2 = field(z + 0.5 * h * k1)
        k3 = field(z + 0.5 * h * k2)
        k4 = field(z + h * k3)
        z = z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(z)) or np.linalg.norm(z) > DIVERGENCE_NORM:
            raise FlowDivergenceError(f"averaged flow diverged at t={(i + 1) * h:.6g}")
        out[i + 1] = z
    return FlowPath(np.linspace(0.0, T, steps + 1), out, h)
