import warnings

import numpy as np
import pytest

from transmute import builtin_model, integrate_averaged, model_from_dict
from transmute.quasipotential import (
    ExitProfile,
    PathAction,
    boundary_samples,
    check_assumptions,
    default_T_grid,
    dominant_mode,
    find_exit_minimizer,
    flow_exit,
    minimize_action,
    quasipotential_V,
    stationary_points,
)

EPS = 0.1


def _outward():
    return model_from_dict({
        "dims": {"n": 0, "m": 2, "K": 1},
        "modes": {"1": {"f": ["z1", "z2"], "sigma": [["1", "0"], ["0", "1"]]}},
        "domain": {"level_set": "z1^2 + z2^2 - 1", "box": [[-1, 1], [-1, 1]]},
        "boundary": {"g": ["0"]},
    })


def test_envelope_gradient_matches_finite_differences(tml5, rng):
    act = PathAction(tml5, [0.0, 0.0], [0.5, 0.6], 1.0, 12, EPS, EPS ** 2)
    x = act.straight_line() + 0.05 * rng.normal(size=act.straight_line().shape)
    _, g = act.value_and_grad(x)
    h = 1e-6
    for j in rng.choice(x.size, 6, replace=False):
        e = np.zeros_like(x)
        e[j] = h
        act._warm = None
        fd = (act.value(x + e) - act.value(x - e)) / (2 * h)
        assert g[j] == pytest.approx(fd, rel=1e-5, abs=1e-7)


def test_flow_endpoint_has_zero_action(tml5):
    T = 0.5
    end = integrate_averaged(tml5, [0.0, 0.0], T, 1e-3).end
    res = minimize_action(tml5, [0.0, 0.0], end, T, 24, EPS, EPS ** 2, starts=1)
    assert res.value <= 1e-3


def test_constant_path_at_fixed_point(ou):
    res = minimize_action(ou, [0.0], [0.0], 2.0, 16, EPS, 0.0, starts=2)
    assert res.value <= 1e-3


def test_ou_quasipotential_radius_one(ou):
    V, best = quasipotential_V(ou, [0.0], [1.0], EPS, 0.0, [2.0, 4.0, 8.0], 60, starts=1)
    assert V == pytest.approx(1.0, rel=0.02)
    assert np.all(np.diff(best.path.positions[:, 0]) > -1e-6)
    assert quasipotential_V(ou, [0.0], [0.0], EPS, 0.0, [1.0], 16, starts=1)[0] <= 1e-3


def test_ou_monotone_in_radius(ou):
    v1 = quasipotential_V(ou, [0.0], [1.0], EPS, 0.0, [4.0], 30, starts=1)[0]
    v2 = quasipotential_V(ou, [0.0], [2.0], EPS, 0.0, [4.0], 30, starts=1)[0]
    assert v2 > v1


def test_minimize_action_argument_checks(tml5, ou):
    with pytest.raises(ValueError):
        minimize_action(ou, [0.0], [1.0], 1.0, 4, EPS, 0.0)
    with pytest.raises(ValueError):
        minimize_action(tml5, [0, 0], [0.5, 0.5], 1.0, 16, EPS, 0.0)


def test_boundary_samples_lie_on_level_set(tml5):
    pts = boundary_samples(tml5, 12)
    assert pts.shape == (12, 2)
    np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-9)


def test_symmetric_model_has_no_unique_exit():
    spec = builtin_model("ou-k1", {"theta": 1, "m": 2, "radius": 1.0})
    samples = boundary_samples(spec, 4)
    with pytest.warns(RuntimeWarning, match="not unique"):
        prof = find_exit_minimizer(spec, EPS, 0.0, samples, [4.0], 20)
    assert not prof.unique_exit
    assert prof.V.max() - prof.V.min() <= 0.03 * prof.V.mean()


def test_lln_exit_profile(tml5):
    samples = boundary_samples(tml5, 4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        prof = find_exit_minimizer(tml5, EPS, EPS ** 2, samples, [1.0], 20, z_start=[0.0, 0.0])
    t, z = flow_exit(tml5, [0.0, 0.0])
    np.testing.assert_allclose(prof.z_bar, z)
    assert prof.unique_exit and prof.gap > 0
    assert prof.k0 == 0 and prof.unique_mode
    assert prof.flow_exit_time == pytest.approx(t)
    back = ExitProfile.from_dict(prof.to_dict())
    np.testing.assert_array_equal(back.z_bar, prof.z_bar)
    assert back.k0 == prof.k0


def test_dominant_mode_at_top_of_disc(tml):
    k, margin, n, prods = dominant_mode(tml, [0.0, 1.0])
    np.testing.assert_allclose(n, [0.0, 1.0], atol=1e-8)
    assert k == 0 and margin > 0
    np.testing.assert_allclose(prods, [0.0, -2.0], atol=1e-8)


def test_assumption_checks(tml, ou):
    rep = check_assumptions(tml, boundary_samples(tml, 1000), [[0.0, 0.0]])
    # xy - y^2 changes sign on the circle, so the check must flag it
    assert not rep.inward_ok and rep.witnesses
    ou_rep = check_assumptions(ou, boundary_samples(ou, 2), [[0.5], [-1.0]])
    assert ou_rep.inward_ok and ou_rep.unique_stationary
    np.testing.assert_allclose(ou_rep.stationary, [[0.0]], atol=1e-10)
    out = check_assumptions(_outward(), boundary_samples(_outward(), 16), [[0.2, 0.1]])
    assert not out.inward_ok and len(out.witnesses) == 16


def test_stationary_points_and_T_grid(ou):
    pts = stationary_points(ou, [[1.0], [-2.0]])
    np.testing.assert_allclose(pts, [[0.0]], atol=1e-10)
    grid = default_T_grid(ou, [0.0])
    np.testing.assert_allclose(grid[[0, -1]], [0.5, 8.0], rtol=1e-6)
    assert flow_exit(ou, [1.0], t_max=3.0) is None
