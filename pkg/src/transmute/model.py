"""Model definitions for switching diffusions.

A :class:`ModelSpec` bundles everything needed to simulate

    dx = F(z) dt                              (slow block, n components)
    dy = f_k(z) dt + sqrt(eps) sigma_k(z) dw  (fast block, m components)

where the mode ``k`` jumps to ``j`` at rate ``c_kj(z) / eps``, together with a
level-set domain ``G = {phi_G < 0}`` and per-mode boundary data ``g_k``.

Modes are numbered ``1..K`` in config files and 0-based in code.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from scipy.stats import qmc

from .expr import ExprError, ExprField, parse_expr

try:  # pragma: no cover - depends on interpreter version
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

__all__ = [
    "ModelConfigError",
    "ModelSpec",
    "CheckResult",
    "ValidationReport",
    "load_model",
    "model_from_dict",
    "builtin_model",
    "BUILTIN_MODELS",
    "validate_model",
]


class ModelConfigError(ValueError):
    """Invalid model configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True, eq=False)
class ModelSpec:
    n: int
    m: int
    K: int
    F: tuple[ExprField, ...]
    f: tuple[tuple[ExprField, ...], ...]
    sigma: tuple[tuple[tuple[ExprField, ...], ...], ...]
    rates: Mapping[tuple[int, int], ExprField]
    level_set: ExprField
    box: np.ndarray
    boundary: tuple[ExprField, ...]
    name: str = "model"

    def __post_init__(self):
        d = self.n + self.m
        if self.K < 1:
            raise ModelConfigError("dims.K", "mode count must be >= 1")
        if self.n < 0 or self.m < 0 or d < 1:
            raise ModelConfigError("dims", "need n >= 0, m >= 0 and n + m >= 1")
        if len(self.F) != self.n:
            raise ModelConfigError("drift.F", f"expected {self.n} components")
        if len(self.f) != self.K or len(self.sigma) != self.K:
            raise ModelConfigError("modes", f"expected {self.K} modes")
        for k in range(self.K):
            if len(self.f[k]) != self.m:
                raise ModelConfigError(f"modes.{k + 1}.f", f"expected {self.m} components")
            if len(self.sigma[k]) != self.m or any(len(r) != self.m for r in self.sigma[k]):
                raise ModelConfigError(f"modes.{k + 1}.sigma", f"expected a {self.m}x{self.m} grid")
        for k in range(self.K):
            for j in range(self.K):
                if k != j and (k, j) not in self.rates:
                    raise ModelConfigError("rates", f"missing rate {k + 1}->{j + 1}")
        if len(self.boundary) != self.K:
            raise ModelConfigError("boundary.g", f"expected {self.K} entries")
        box = np.asarray(self.box, dtype=float)
        if box.shape != (d, 2) or np.any(box[:, 1] <= box[:, 0]):
            raise ModelConfigError("domain.box", f"expected {d} increasing [lo, hi] pairs")
        object.__setattr__(self, "box", box)
        object.__setattr__(
            self,
            "_constant_rates",
            all(c.is_constant for c in self.rates.values()),
        )

    # -- geometry -----------------------------------------------------------

    @property
    def d(self) -> int:
        return self.n + self.m

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.box[:, 1] - self.box[:, 0]))

    def level(self, z) -> np.ndarray | float:
        return self.level_set.evaluate(z)

    def inside(self, z) -> np.ndarray | bool:
        return self.level(z) < 0

    def level_gradient(self, z, h: float = 1e-6) -> np.ndarray:
        """Central-difference gradient of the level-set function."""
        z = np.asarray(z, dtype=float)
        grad = np.empty(z.shape)
        for i in range(self.d):
            e = np.zeros(self.d)
            e[i] = h
            grad[..., i] = (self.level(z + e) - self.level(z - e)) / (2 * h)
        return grad

    def normal(self, z) -> np.ndarray:
        g = self.level_gradient(z)
        return g / np.linalg.norm(g, axis=-1, keepdims=True)

    # -- coefficients -------------------------------------------------------

    def drift(self, z, k: int) -> np.ndarray:
        """Stacked drift ``(F, f_k)`` at ``z`` (shape ``(..., d)``)."""
        z = np.asarray(z, dtype=float)
        parts = [c.evaluate(z) for c in self.F] + [c.evaluate(z) for c in self.f[k]]
        return np.stack(np.broadcast_arrays(*parts), axis=-1).astype(float)

    def drifts(self, z) -> np.ndarray:
        """All mode drifts, shape ``(..., K, d)``."""
        z = np.asarray(z, dtype=float)
        slow = [c.evaluate(z) for c in self.F]
        out = np.empty(z.shape[:-1] + (self.K, self.d))
        for i, v in enumerate(slow):
            out[..., :, i] = np.asarray(v)[..., None]
        for k in range(self.K):
            for i, c in enumerate(self.f[k]):
                out[..., k, self.n + i] = c.evaluate(z)
        return out

    def sigma_at(self, z, k: int) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        out = np.empty(z.shape[:-1] + (self.m, self.m))
        for i in range(self.m):
            for j in range(self.m):
                out[..., i, j] = self.sigma[k][i][j].evaluate(z)
        return out

    def fast_diffusion(self, z, k: int) -> np.ndarray:
        """``a_k = sigma_k sigma_k^T``, symmetric PSD by construction."""
        s = self.sigma_at(z, k)
        return s @ np.swapaxes(s, -1, -2)

    def full_diffusion(self, z, ratio: float = 0.0) -> np.ndarray:
        """Per-mode ``(n+m)``-dimensional diffusion ``blockdiag(ratio I_n, a_k)``.

        ``ratio`` is the slow-block regularization ``deltahat / eps``; zero
        gives the degenerate matrix. Shape ``(..., K, d, d)``.
        """
        z = np.asarray(z, dtype=float)
        out = np.zeros(z.shape[:-1] + (self.K, self.d, self.d))
        for i in range(self.n):
            out[..., :, i, i] = ratio
        for k in range(self.K):
            out[..., k, self.n:, self.n:] = self.fast_diffusion(z, k)
        return out

    def rate(self, k: int, j: int, z, t=0.0):
        return self.rates[(k, j)].evaluate(z, t)

    def rate_matrix(self, z, t=0.0) -> np.ndarray:
        """Generator ``C(z)`` with zero row sums, shape ``(..., K, K)``."""
        z = np.asarray(z, dtype=float)
        out = np.zeros(z.shape[:-1] + (self.K, self.K))
        for (k, j), c in self.rates.items():
            out[..., k, j] = c.evaluate(z, t)
        idx = np.arange(self.K)
        out[..., idx, idx] = 0.0
        out[..., idx, idx] = -out.sum(axis=-1)
        return out

    @property
    def constant_rates(self) -> bool:
        return self._constant_rates

    def boundary_value(self, z, k: int):
        return self.boundary[k].evaluate(z)

    def with_rates(self, rates: Mapping[tuple[int, int], ExprField]) -> "ModelSpec":
        """Copy of the model with replaced switching rates."""
        return ModelSpec(
            self.n, self.m, self.K, self.F, self.f, self.sigma, dict(rates),
            self.level_set, self.box, self.boundary, self.name,
        )

    def with_boundary(self, boundary) -> "ModelSpec":
        fields = tuple(_field(b, self.d, f"boundary.g[{i}]") for i, b in enumerate(boundary))
        return ModelSpec(
            self.n, self.m, self.K, self.F, self.f, self.sigma, self.rates,
            self.level_set, self.box, fields, self.name,
        )

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "dims": {"n": self.n, "m": self.m, "K": self.K},
            "drift": {"F": [c.source for c in self.F]},
            "modes": {
                str(k + 1): {
                    "f": [c.source for c in self.f[k]],
                    "sigma": [[c.source for c in row] for row in self.sigma[k]],
                }
                for k in range(self.K)
            },
            "rates": {
                f"{k + 1}->{j + 1}": self.rates[(k, j)].source
                for k in range(self.K)
                for j in range(self.K)
                if k != j
            },
            "domain": {
                "level_set": self.level_set.source,
                "box": self.box.tolist(),
            },
            "boundary": {"g": [c.source for c in self.boundary]},
        }


# ---------------------------------------------------------------------------
# Config loading
# ---------------------------------------------------------------------------


def _field(text: Any, d: int, key: str) -> ExprField:
    if isinstance(text, ExprField):
        return text
    if isinstance(text, bool) or not isinstance(text, (str, int, float)):
        raise ModelConfigError(key, f"expected an expression string, got {type(text).__name__}")
    try:
        return parse_expr(text if isinstance(text, str) else repr(float(text)), d)
    except ExprError as exc:
        raise ModelConfigError(key, str(exc)) from exc


def _section(data: Mapping, key: str) -> Mapping:
    if key not in data:
        raise ModelConfigError(key, "missing section")
    sec = data[key]
    if not isinstance(sec, Mapping):
        raise ModelConfigError(key, "expected a table")
    return sec


def _int(sec: Mapping, key: str, full: str) -> int:
    if key not in sec:
        raise ModelConfigError(full, "missing value")
    v = sec[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ModelConfigError(full, "expected an integer")
    return v


def _parse_rate_key(key: str, K: int) -> tuple[int, int]:
    for sep in ("->", ",", "_"):
        if sep in key:
            a, b = key.split(sep, 1)
            break
    else:
        raise ModelConfigError(f"rates.{key}", "expected a key like '1->2'")
    try:
        k, j = int(a.strip()), int(b.strip())
    except ValueError:
        raise ModelConfigError(f"rates.{key}", "mode labels must be integers") from None
    if not (1 <= k <= K and 1 <= j <= K) or k == j:
        raise ModelConfigError(f"rates.{key}", f"modes must be distinct and in 1..{K}")
    return k - 1, j - 1


def model_from_dict(data: Mapping[str, Any]) -> ModelSpec:
    """Build a :class:`ModelSpec` from the documented config layout."""
    dims = _section(data, "dims")
    n, m, K = _int(dims, "n", "dims.n"), _int(dims, "m", "dims.m"), _int(dims, "K", "dims.K")
    if n < 0 or m < 0 or n + m < 1:
        raise ModelConfigError("dims", "need n >= 0, m >= 0 and n + m >= 1")
    if K < 1:
        raise ModelConfigError("dims.K", "mode count must be >= 1")
    d = n + m

    drift = data.get("drift", {}) if n == 0 else _section(data, "drift")
    F_src = drift.get("F", [])
    if not isinstance(F_src, list) or len(F_src) != n:
        raise ModelConfigError("drift.F", f"expected a list of {n} expressions")
    F = tuple(_field(s, d, f"drift.F[{i}]") for i, s in enumerate(F_src))

    modes = _section(data, "modes")
    f, sigma = [], []
    for k in range(1, K + 1):
        key = f"modes.{k}"
        if str(k) not in modes:
            raise ModelConfigError(key, "missing mode")
        mode = modes[str(k)]
        fk = mode.get("f", [])
        if not isinstance(fk, list) or len(fk) != m:
            raise ModelConfigError(f"{key}.f", f"expected a list of {m} expressions")
        f.append(tuple(_field(s, d, f"{key}.f[{i}]") for i, s in enumerate(fk)))
        sk = mode.get("sigma", [])
        if m == 1 and isinstance(sk, (str, int, float)):
            sk = [[sk]]
        if not isinstance(sk, list) or len(sk) != m or any(
            not isinstance(r, list) or len(r) != m for r in sk
        ):
            raise ModelConfigError(f"{key}.sigma", f"expected a {m}x{m} grid of expressions")
        sigma.append(
            tuple(
                tuple(_field(s, d, f"{key}.sigma[{i}][{j}]") for j, s in enumerate(row))
                for i, row in enumerate(sk)
            )
        )

    rates: dict[tuple[int, int], ExprField] = {}
    rate_sec = data.get("rates", {}) if K == 1 else _section(data, "rates")
    for rk, rv in rate_sec.items():
        kj = _parse_rate_key(str(rk), K)
        rates[kj] = _field(rv, d, f"rates.{rk}")
    for k in range(K):
        for j in range(K):
            if k != j and (k, j) not in rates:
                raise ModelConfigError(f"rates.{k + 1}->{j + 1}", "missing rate")

    dom = _section(data, "domain")
    if "level_set" not in dom:
        raise ModelConfigError("domain.level_set", "missing value")
    level = _field(dom["level_set"], d, "domain.level_set")
    box = dom.get("box")
    try:
        box_arr = np.asarray(box, dtype=float)
    except (TypeError, ValueError):
        raise ModelConfigError("domain.box", "expected numeric [lo, hi] pairs") from None
    if box_arr.shape != (d, 2) or np.any(box_arr[:, 1] <= box_arr[:, 0]):
        raise ModelConfigError("domain.box", f"expected {d} increasing [lo, hi] pairs")

    bsec = data.get("boundary", {"g": ["0"] * K})
    g = bsec.get("g") if isinstance(bsec, Mapping) else None
    if g is None and isinstance(bsec, Mapping):
        g = [bsec.get(str(k)) for k in range(1, K + 1)]
    if not isinstance(g, list) or len(g) != K or any(x is None for x in g):
        raise ModelConfigError("boundary.g", f"expected {K} expressions")
    boundary = tuple(_field(s, d, f"boundary.g[{i}]") for i, s in enumerate(g))

    return ModelSpec(
        n, m, K, F, tuple(f), tuple(sigma), rates, level, box_arr, boundary,
        name=str(data.get("name", "model")),
    )


def load_model(path: str | Path) -> ModelSpec:
    """Load a model from a ``.toml`` or ``.json`` file.

    A ``builtin`` key (with optional ``params`` table) selects a registry
    model instead of spelling out every field.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ModelConfigError("model", f"cannot read {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(raw.decode())
        else:
            data = tomllib.loads(raw.decode())
    except (ValueError, UnicodeDecodeError) as exc:
        raise ModelConfigError("model", f"cannot parse {path}: {exc}") from exc
    if "builtin" in data:
        return builtin_model(data["builtin"], data.get("params", {}))
    return model_from_dict(data)


# ---------------------------------------------------------------------------
# Builtin registry
# ---------------------------------------------------------------------------


def _num(x: float) -> str:
    return repr(float(x))


def _two_mode_linear(c12=1.0, c21=1.0, cx=0.0, cy=0.0, radius=1.0, g1="1", g2="0"):
    lvl = f"(z1 - {_num(cx)})^2 + (z2 - {_num(cy)})^2 - {_num(radius)}^2"
    return {
        "name": "two-mode-linear",
        "dims": {"n": 1, "m": 1, "K": 2},
        "drift": {"F": ["z2"]},
        "modes": {
            "1": {"f": ["-(z2-1)"], "sigma": [["1"]]},
            "2": {"f": ["-(z2+1)"], "sigma": [["1"]]},
        },
        "rates": {"1->2": _num(c12), "2->1": _num(c21)},
        "domain": {
            "level_set": lvl,
            "box": [[cx - radius, cx + radius], [cy - radius, cy + radius]],
        },
        "boundary": {"g": [str(g1), str(g2)]},
    }


def _ou_k1(theta, sigma=1.0, m=1, radius=2.5, g="1"):
    m = int(m)
    drift = "-z{i}" if float(theta) == 1.0 else f"-{_num(theta)}*z{{i}}"
    sig = "1" if float(sigma) == 1.0 else _num(sigma)
    return {
        "name": "ou-k1",
        "dims": {"n": 0, "m": m, "K": 1},
        "modes": {
            "1": {
                "f": [drift.format(i=i + 1) for i in range(m)],
                "sigma": [[sig if i == j else "0" for j in range(m)] for i in range(m)],
            }
        },
        "domain": {
            "level_set": " + ".join(f"z{i + 1}^2" for i in range(m)) + f" - {_num(radius)}^2",
            "box": [[-radius, radius]] * m,
        },
        "boundary": {"g": [str(g)]},
    }


def _const_coef(f1=1.0, f2=-1.0, s1=1.0, s2=1.0, c12=1.0, c21=2.0, radius=1.0, g1="1", g2="0"):
    return {
        "name": "const-coef",
        "dims": {"n": 0, "m": 1, "K": 2},
        "modes": {
            "1": {"f": [_num(f1)], "sigma": [[_num(s1)]]},
            "2": {"f": [_num(f2)], "sigma": [[_num(s2)]]},
        },
        "rates": {"1->2": _num(c12), "2->1": _num(c21)},
        "domain": {"level_set": f"z1^2 - {_num(radius)}^2", "box": [[-radius, radius]]},
        "boundary": {"g": [str(g1), str(g2)]},
    }


BUILTIN_MODELS = {
    "two-mode-linear": _two_mode_linear,
    "ou-k1": _ou_k1,
    "const-coef": _const_coef,
}

_REQUIRED = {"ou-k1": ("theta",)}


def builtin_model(name: str, params: Mapping[str, Any] | None = None) -> ModelSpec:
    """Instantiate a registry model.

    ``two-mode-linear`` (params ``c12, c21, cx, cy, radius, g1, g2``),
    ``ou-k1`` (``theta`` required; ``sigma, m, radius, g``) and
    ``const-coef`` (``f1, f2, s1, s2, c12, c21, radius, g1, g2``).
    """
    if name not in BUILTIN_MODELS:
        raise ModelConfigError("builtin", f"unknown model {name!r}; known: {sorted(BUILTIN_MODELS)}")
    params = dict(params or {})
    for req in _REQUIRED.get(name, ()):
        if req not in params:
            raise ModelConfigError(f"params.{req}", f"missing parameter for {name!r}")
    factory = BUILTIN_MODELS[name]
    allowed = factory.__code__.co_varnames[: factory.__code__.co_argcount]
    for key in params:
        if key not in allowed:
            raise ModelConfigError(f"params.{key}", f"unknown parameter for {name!r}")
    return model_from_dict(factory(**params))


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass
class CheckResult:
    passed: bool
    witnesses: list[list[float]] = field(default_factory=list)
    detail: dict[str, Any] = field(default_factory=dict)

    def to_dict(self):
        return {"passed": self.passed, "witnesses": self.witnesses, **self.detail}


@dataclass
class ValidationReport:
    samples: int
    checks: dict[str, CheckResult]

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def to_dict(self):
        return {
            "ok": self.ok,
            "samples": self.samples,
            "checks": {k: v.to_dict() for k, v in self.checks.items()},
        }


_MAX_WITNESSES = 5


def _witness_rows(points: np.ndarray, bad: np.ndarray) -> list[list[float]]:
    return [list(map(float, p)) for p in points[bad][:_MAX_WITNESSES]]


def _safe_eval(fn, points):
    """Evaluate pointwise-failing fields; failures become NaN for bookkeeping."""
    try:
        return np.asarray(fn(points), dtype=float)
    except ExprError:
        out = []
        for p in points:
            try:
                out.append(np.asarray(fn(p[None, :]), dtype=float)[0])
            except ExprError:
                out.append(np.full(np.shape(fn(points[:0]))[1:], np.nan))
        return np.asarray(out, dtype=float)


def validate_model(spec: ModelSpec, samples: int = 1000, seed: int = 0) -> ValidationReport:
    """Check rate positivity, ellipticity and domain boundedness at samples.

    Points are a scrambled Halton sequence in the bounding box. Lipschitz
    continuity is not checked; it remains the model author's obligation.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    d = spec.d
    lo, hi = spec.box[:, 0], spec.box[:, 1]
    sampler = qmc.Halton(d=d, scramble=True, seed=seed)
    pts = qmc.scale(sampler.random(samples), lo, hi) if d > 0 else np.zeros((samples, 0))
    checks: dict[str, CheckResult] = {}

    # rate positivity
    if spec.K > 1:
        C = _safe_eval(lambda p: spec.rate_matrix(p), pts)
        off = ~np.eye(spec.K, dtype=bool)
        offvals = C[:, off]
        bad = ~np.all(offvals > 0, axis=1)
        checks["rate_positivity"] = CheckResult(
            not bad.any(),
            _witness_rows(pts, bad),
            {"min_rate": float(np.nanmin(offvals)) if np.isfinite(offvals).any() else None},
        )
    else:
        checks["rate_positivity"] = CheckResult(True, [], {"min_rate": None})

    # ellipticity of a_k = sigma_k sigma_k^T
    if spec.m > 0:
        eig_min = np.full(samples, np.inf)
        eig_max = np.full(samples, -np.inf)
        for k in range(spec.K):
            a = _safe_eval(lambda p, k=k: spec.fast_diffusion(p, k), pts)
            finite = np.all(np.isfinite(a), axis=(1, 2))
            ev = np.full((samples, spec.m), np.nan)
            ev[finite] = np.linalg.eigvalsh(a[finite])
            eig_min = np.fmin(eig_min, np.where(finite, ev.min(axis=1), -np.inf))
            eig_max = np.fmax(eig_max, np.where(finite, ev.max(axis=1), np.inf))
        bad = ~(eig_min > 0)
        checks["ellipticity"] = CheckResult(
            not bad.any(),
            _witness_rows(pts, bad),
            {"a_min": float(eig_min.min()), "a_max": float(eig_max.max())},
        )
    else:
        checks["ellipticity"] = CheckResult(True, [], {"a_min": None, "a_max": None})

    # boundedness: phi_G >= 0 in a shell outside the box
    width = hi - lo
    shell = qmc.Halton(d=d, scramble=True, seed=seed + 1).random(4 * samples)
    shell = qmc.scale(shell, lo - 0.5 * width, hi + 0.5 * width)
    outside = np.any((shell < lo) | (shell > hi), axis=1)
    shell = shell[outside][:samples]
    phi = _safe_eval(lambda p: spec.level(p), shell)
    bad = ~(phi >= 0)
    checks["domain_bounded"] = CheckResult(
        not bad.any(), _witness_rows(shell, bad), {"shell_samples": int(len(shell))}
    )
    return ValidationReport(samples, checks)
