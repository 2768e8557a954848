import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transmute import (
    averaged_drift,
    builtin_model,
    generator_at,
    integrate_averaged,
    invariant_weights,
    model_from_dict,
)
from transmute.switching import GeneratorMatrix, SwitchingError, averaged_drift_batch, stationary_weights


def _three_mode():
    return model_from_dict({
        "dims": {"n": 0, "m": 1, "K": 3},
        "modes": {str(k): {"f": [str(k)], "sigma": [["1"]]} for k in (1, 2, 3)},
        "rates": {f"{a}->{b}": "1" for a in (1, 2, 3) for b in (1, 2, 3) if a != b},
        "domain": {"level_set": "z1^2 - 1", "box": [[-1, 1]]},
        "boundary": {"g": ["0", "0", "0"]},
    })


def test_generator_two_modes():
    spec = builtin_model("two-mode-linear", {"c21": 3})
    np.testing.assert_allclose(generator_at(spec, [0, 0]).matrix, [[-1, 1], [3, -3]])


def test_generator_single_mode(ou):
    np.testing.assert_array_equal(generator_at(ou, [0.3]).matrix, [[0.0]])


def test_generator_three_modes_uniform():
    C = generator_at(_three_mode(), [0.0]).matrix
    np.testing.assert_allclose(np.diag(C), -2.0)
    np.testing.assert_allclose(C[~np.eye(3, dtype=bool)], 1.0)
    np.testing.assert_allclose(C.sum(1), 0.0, atol=1e-15)


def test_invariant_weights_oracles(ou):
    spec = builtin_model("two-mode-linear", {"c21": 3})
    np.testing.assert_allclose(invariant_weights(generator_at(spec, [0, 0])).weights, [0.75, 0.25])
    np.testing.assert_allclose(invariant_weights(generator_at(ou, [0.0])).weights, [1.0])
    sym = builtin_model("two-mode-linear")
    np.testing.assert_allclose(invariant_weights(generator_at(sym, [0, 0])).weights, [0.5, 0.5])


def test_reducible_generator_rejected():
    gen = GeneratorMatrix(np.array([[-1.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]), np.zeros(1))
    with pytest.raises(SwitchingError):
        invariant_weights(gen)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.05, 20.0), min_size=6, max_size=6))
def test_invariant_weights_on_simplex(rates):
    C = np.zeros((3, 3))
    C[~np.eye(3, dtype=bool)] = rates
    C[np.diag_indices(3)] = -C.sum(1)
    w = invariant_weights(GeneratorMatrix(C, np.zeros(1))).weights
    assert np.all(w > 0)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(w @ C, 0.0, atol=1e-10 * np.abs(C).max())
    np.testing.assert_allclose(stationary_weights(C[None])[0], w, atol=1e-10)


def test_averaged_drift(tml, ou, rng):
    for z in rng.uniform(-0.6, 0.6, size=(5, 2)):
        np.testing.assert_allclose(averaged_drift(tml, z), [z[1], -z[1]], atol=1e-12)
    np.testing.assert_allclose(averaged_drift(ou, [0.7]), [-0.7])
    z = rng.uniform(-0.6, 0.6, size=(9, 2))
    np.testing.assert_allclose(averaged_drift_batch(tml, z), np.stack([z[:, 1], -z[:, 1]], 1), atol=1e-12)


def test_symmetric_fast_block_cancels():
    spec = builtin_model("const-coef", {"f1": 2.0, "f2": -2.0, "c12": 1.5, "c21": 1.5})
    assert averaged_drift(spec, [0.1])[0] == pytest.approx(0.0, abs=1e-14)


def test_linear_flow_closed_form():
    spec = builtin_model("ou-k1", {"theta": 1, "m": 2})
    path = integrate_averaged(spec, [1.0, 1.0], 1.0, 1e-3)
    np.testing.assert_allclose(path.end, np.exp(-1.0) * np.ones(2), atol=1e-6)
    assert path.times[-1] == pytest.approx(1.0)


def test_small_step_taylor(tml):
    z0 = np.array([0.2, 0.4])
    dt = 1e-4
    path = integrate_averaged(tml, z0, dt, dt)
    err = path.end - z0 - averaged_drift(tml, z0) * dt
    assert np.abs(err).max() < 10 * dt ** 2


def test_fixed_point_is_constant(tml):
    path = integrate_averaged(tml, [0.3, 0.0], 2.0, 0.01)
    np.testing.assert_allclose(path.positions, np.tile([0.3, 0.0], (len(path.times), 1)), atol=1e-14)
