import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transmute import averaged_drift, builtin_model, generator_at, integrate_averaged, invariant_weights
from transmute.ldp import (
    PathDiscretization,
    action_I,
    action_S,
    action_S_timed,
    eigen_gradient,
    h_matrix,
    invariant_suite,
    legendre_eta,
    local_hamiltonian,
    occupation_rate_L,
    principal_eigenvalue,
    rho,
    solve_rho,
)
from transmute.simulate import rate_schedule

EPS, DH = 0.1, 0.01  # slow-block ratio deltahat/eps = 0.1


def _occupation_along(spec, path):
    w = np.array([invariant_weights(generator_at(spec, z)).weights for z in path.positions])
    dt = np.diff(path.times)
    mid = 0.5 * (w[1:] + w[:-1])
    mu = np.vstack([np.zeros(spec.K), np.cumsum(mid * dt[:, None], axis=0)])
    mu[:, -1] = path.times - mu[:, :-1].sum(1)
    return mu


# -- Hamiltonian matrix -----------------------------------------------------


def test_h_matrix_collapses_to_generator(tml):
    H = h_matrix(tml, [0.2, 0.1], [0, 0], [0, 0], EPS, DH)
    np.testing.assert_allclose(H.matrix, tml.rate_matrix([0.2, 0.1]))


def test_h_matrix_single_mode(ou):
    p, a = 0.7, 0.3
    H = h_matrix(ou, [0.5], [p], [a], EPS)
    assert H.matrix.shape == (1, 1)
    assert H.matrix[0, 0] == pytest.approx(0.5 * p * p - 0.5 * p + a)


def test_h_matrix_hand_assembly(tml):
    x, y = 0.3, -0.4
    p1, p2 = 0.8, -1.3
    a = np.array([0.2, -0.5])
    r = DH / EPS
    f = [-(y - 1), -(y + 1)]
    expected = np.array([[-1.0, 1.0], [1.0, -1.0]])
    for k in range(2):
        expected[k, k] += 0.5 * (r * p1 * p1 + p2 * p2) + p1 * y + p2 * f[k] + a[k]
    H = h_matrix(tml, [x, y], [p1, p2], a, EPS, DH)
    np.testing.assert_allclose(H.matrix, expected, rtol=1e-14)


def test_h_matrix_dimension_check(tml):
    with pytest.raises(ValueError):
        h_matrix(tml, [0.0], [0, 0], [0, 0], EPS)


# -- Perron data ------------------------------------------------------------


def test_perron_of_generator(tml):
    eig = principal_eigenvalue(tml.rate_matrix([0.0, 0.0]))
    assert eig.lam == pytest.approx(0.0, abs=1e-14)
    np.testing.assert_allclose(eig.u / eig.u[0], [1.0, 1.0])
    assert principal_eigenvalue(np.array([[2.5]])).lam == 2.5


def test_non_metzler_rejected():
    with pytest.raises(ValueError):
        principal_eigenvalue(np.array([[0.0, -1.0], [1.0, 0.0]]))


@pytest.mark.parametrize("method", ["dense", "power"])
def test_perron_random_metzler(rng, method):
    for _ in range(50):
        H = rng.uniform(0.1, 2.0, size=(3, 3))
        H[np.diag_indices(3)] = rng.normal(size=3) * 3
        eig = principal_eigenvalue(H, method)
        ref = np.linalg.eigvals(H).real.max()
        assert eig.lam == pytest.approx(ref, abs=1e-9)
        np.testing.assert_allclose(H @ eig.u, eig.lam * eig.u, atol=1e-9)
        np.testing.assert_allclose(eig.v @ H, eig.lam * eig.v, atol=1e-9)
        assert np.all(eig.u > 0) and np.all(eig.v > 0)
        assert eig.v @ eig.u == pytest.approx(1.0)


@settings(max_examples=200, deadline=None)
@given(a=st.floats(-20, 20), d=st.floats(-20, 20), b=st.floats(1e-3, 30), c=st.floats(1e-3, 30))
def test_two_by_two_closed_form(a, d, b, c):
    H = np.array([[a, b], [c, d]])
    lam = principal_eigenvalue(H).lam
    exact = 0.5 * (a + d) + math.sqrt(0.25 * (a - d) ** 2 + b * c)
    assert lam == pytest.approx(exact, rel=1e-12, abs=1e-12)


def test_gradient_at_origin_is_invariant_data(tml5, rng):
    for z in rng.uniform(-0.6, 0.6, size=(10, 2)):
        H = h_matrix(tml5, z, [0, 0], [0, 0], EPS, DH)
        eig = principal_eigenvalue(H)
        w = invariant_weights(generator_at(tml5, z)).weights
        np.testing.assert_allclose(eigen_gradient(H, eig, "alpha"), w, atol=1e-12)
        np.testing.assert_allclose(eigen_gradient(H, eig, "p"), averaged_drift(tml5, z), atol=1e-12)


def test_gradient_matches_finite_differences(tml5, rng):
    h = 1e-5
    for _ in range(20):
        z = rng.uniform(-0.6, 0.6, 2)
        p, a = rng.normal(size=2), rng.normal(size=2)
        H = h_matrix(tml5, z, p, a, EPS, DH)
        g = eigen_gradient(H, principal_eigenvalue(H), "p")
        lam = lambda pp: principal_eigenvalue(h_matrix(tml5, z, pp, a, EPS, DH)).lam
        fd = np.array([(lam(p + h * e) - lam(p - h * e)) / (2 * h) for e in np.eye(2)])
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


def test_hessian_matches_finite_differences(tml5, rng):
    z = rng.uniform(-0.5, 0.5, size=(6, 2))
    loc = local_hamiltonian(tml5, z, EPS, DH)
    p, a = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    _, grad, hess, _, _ = loc.derivatives(p, a, True, 2)
    h = 1e-5
    for j in range(4):
        e = np.zeros(4)
        e[j] = h
        gp = loc.derivatives(p + e[:2], a + e[2:], True, 2)[1]
        gm = loc.derivatives(p - e[:2], a - e[2:], True, 2)[1]
        np.testing.assert_allclose(hess[:, :, j], (gp - gm) / (2 * h), rtol=1e-5, atol=1e-7)


# -- conjugates -------------------------------------------------------------


def test_eta_zero_at_averaged_data(tml5, rng):
    for z in rng.uniform(-0.6, 0.6, size=(5, 2)):
        w = invariant_weights(generator_at(tml5, z)).weights
        assert legendre_eta(tml5, z, averaged_drift(tml5, z), w, EPS, DH) == pytest.approx(0, abs=1e-6)


def test_eta_off_simplex_is_infinite(tml):
    assert legendre_eta(tml, [0, 0], [0, 0], [0.6, 0.6], EPS, DH) == math.inf
    assert legendre_eta(tml, [0, 0], [0, 0], [1.2, -0.2], EPS, DH) == math.inf


def test_k1_closed_forms(ou, rng):
    for _ in range(20):
        z, q = rng.uniform(-2, 2), rng.normal() * 3
        exact = 0.5 * (q + z) ** 2
        assert legendre_eta(ou, [z], [q], [1.0], EPS) == pytest.approx(exact, abs=1e-6)
        assert rho(ou, [z], [q], EPS) == pytest.approx(exact, abs=1e-6)


def test_rho_zero_at_averaged_drift(tml5):
    z = np.array([0.2, -0.3])
    assert rho(tml5, z, averaged_drift(tml5, z), EPS, DH) == pytest.approx(0.0, abs=1e-6)


def test_rho_infinite_without_regularization(tml5):
    z = np.array([0.2, -0.3])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert rho(tml5, z, [z[1] + 0.5, 0.0], EPS, 0.0) == math.inf
    assert math.isfinite(rho(tml5, z, [z[1], 0.3], EPS, 0.0))


def test_rho_against_grid_sup(tml5):
    z, q = np.array([0.1, 0.3]), np.array([0.5, -0.4])
    sol = solve_rho(tml5, z, q, EPS, DH)
    loc1 = local_hamiltonian(tml5, z[None], EPS, DH)

    def grid_sup(lo, hi, n):
        P = np.stack(np.meshgrid(np.linspace(lo[0], hi[0], n), np.linspace(lo[1], hi[1], n),
                                 indexing="ij"), -1).reshape(-1, 2)
        rep = lambda a: np.repeat(a, len(P), 0)
        from transmute.ldp import LocalHamiltonian
        loc = LocalHamiltonian(rep(loc1.drifts), rep(loc1.diffusions), rep(loc1.gen))
        vals = P @ q - loc.value(P, np.zeros((len(P), 2)))
        i = int(np.argmax(vals))
        return vals[i], P[i]

    best, arg = grid_sup(np.array([-20.0, -20.0]), np.array([20.0, 20.0]), 801)
    for width in (0.2, 0.004):
        best, arg = grid_sup(arg - width, arg + width, 201)
    assert sol.value == pytest.approx(best, abs=1e-3)
    assert sol.value >= best - 1e-12


def test_occupation_rate_oracles(ou):
    sym = builtin_model("two-mode-linear")
    assert occupation_rate_L(sym, [0.5, 0.5]) == pytest.approx(0.0, abs=1e-6)
    assert occupation_rate_L(sym, [1.0, 0.0]) == pytest.approx(1.0, abs=1e-9)
    assert occupation_rate_L(ou, [1.0]) == pytest.approx(0.0, abs=1e-12)
    spec = builtin_model("two-mode-linear", {"c21": 3})
    assert occupation_rate_L(spec, [0.75, 0.25]) == pytest.approx(0.0, abs=1e-6)
    # two-state closed form: (sqrt(c12 b1) - sqrt(c21 b2))^2
    b = np.array([0.4, 0.6])
    exact = (math.sqrt(1 * b[0]) - math.sqrt(3 * b[1])) ** 2
    assert occupation_rate_L(spec, b) == pytest.approx(exact, abs=1e-8)


# -- actions ------------------------------------------------------------------


@pytest.fixture(scope="module")
def flow_path():
    spec = builtin_model("two-mode-linear", {"c21": 5})
    fp = integrate_averaged(spec, [0.0, 0.0], 1.0, 1e-3)
    idx = np.linspace(0, len(fp.times) - 1, 201).astype(int)
    path = PathDiscretization(fp.times[idx], fp.positions[idx])
    return spec, PathDiscretization(path.times, path.positions, _occupation_along(spec, path))


def test_action_zero_on_averaged_flow(flow_path):
    spec, path = flow_path
    assert action_S(spec, path, EPS, DH).value <= 1e-4
    assert action_I(spec, path, EPS, DH).value <= 1e-4


def test_action_positive_on_reversed_flow(flow_path):
    spec, path = flow_path
    rev = PathDiscretization(path.times, path.positions[::-1])
    assert action_I(spec, rev, EPS, DH).value > 1e-2


def test_action_nonnegative(tml5, rng):
    t = np.linspace(0, 1, 21)
    pos = np.cumsum(rng.normal(scale=0.05, size=(21, 2)), 0)
    w = rng.dirichlet([1, 1], size=20)
    mu = np.vstack([[0, 0], np.cumsum(w * 0.05, 0)])
    mu[:, 1] = t - mu[:, 0]
    path = PathDiscretization(t, pos, mu)
    assert action_S(tml5, path, EPS, DH).value >= 0
    assert action_I(tml5, path, EPS, DH).value >= 0


def test_action_refinement(tml5):
    def val(N):
        t = np.linspace(0, 1, N + 1)
        pos = np.stack([0.3 * np.sin(np.pi * t), 0.4 * t], 1)
        return action_I(tml5, PathDiscretization(t, pos), EPS, DH).value

    a, b = val(50), val(100)
    assert abs(a - b) / b < 0.05


def test_straight_line_k1_quadratic(ou):
    # z(t) = a + v t, Lagrangian (v + z)^2 / 2 integrated exactly
    a, v, T = 0.2, 0.9, 1.5
    t = np.linspace(0, T, 201)
    path = PathDiscretization(t, (a + v * t)[:, None])
    exact = ((v + a + v * T) ** 3 - (v + a) ** 3) / (6 * v)
    assert action_I(ou, path, EPS).value == pytest.approx(exact, abs=1e-3)


def test_timed_action(flow_path):
    spec, path = flow_path
    same = rate_schedule(spec, {"1->2": "1", "2->1": "5"})
    a = action_S(spec, path, EPS, DH).value
    b = action_S_timed(spec, path, same, EPS, DH).value
    assert b == pytest.approx(a, abs=1e-9)
    doubled = rate_schedule(spec, {"1->2": "2", "2->1": "5"})
    assert action_S_timed(spec, path, doubled, EPS, DH).value > 1e-3
    bad = rate_schedule(spec, {"1->2": "0.5 - t", "2->1": "5"})
    with pytest.raises(ValueError):
        action_S_timed(spec, path, bad, EPS, DH)
    empty = PathDiscretization([0.0], [[0.0, 0.0]], [[0.0, 0.0]])
    assert action_S_timed(spec, empty, same, EPS, DH).value == 0.0


def test_path_validation():
    with pytest.raises(ValueError):
        PathDiscretization([0.0, 0.0], [[0.0], [1.0]])
    with pytest.raises(ValueError):
        PathDiscretization([0.0, 1.0], [[0.0], [1.0]], [[0.0, 0.0], [0.3, 0.3]])


def test_invariant_suite_small(tml5):
    rep = invariant_suite(tml5, EPS, DH, samples=100, seed=3, infimum_samples=3)
    assert rep["passed"], rep
