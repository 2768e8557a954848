import math
import warnings

import numpy as np
import pytest

from transmute import SimConfig, batch_exit_mc, builtin_model, model_from_dict, simulate_until_exit
from transmute.expr import parse_expr
from transmute.rng import StreamBank, trial_generator
from transmute.simulate import (
    HybridState,
    SwitchEvent,
    TrajectoryRecord,
    likelihood_ratio,
    occupation_fractions,
    rate_schedule,
    simulate_batch,
    step,
    thinning_bounds,
)


def _outward():
    return model_from_dict({
        "dims": {"n": 2, "m": 0, "K": 1},
        "drift": {"F": ["z1", "z2"]},
        "modes": {"1": {"f": [], "sigma": []}},
        "domain": {"level_set": "z1^2 + z2^2 - 1", "box": [[-1, 1], [-1, 1]]},
        "boundary": {"g": ["1"]},
    })


def _brownian():
    return model_from_dict({
        "dims": {"n": 0, "m": 1, "K": 1},
        "modes": {"1": {"f": ["0"], "sigma": [["1"]]}},
        "domain": {"level_set": "z1^2 - 10000", "box": [[-100, 100]]},
        "boundary": {"g": ["0"]},
    })


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(eps=0.0)
    with pytest.raises(ValueError):
        SimConfig(eps=0.1, deltahat=-1)
    with pytest.warns(RuntimeWarning):
        SimConfig(eps=0.1, dt=0.05)


def test_deterministic_outward_exit():
    spec = _outward()
    cfg = SimConfig(eps=1.0, dt=1e-4, t_max=5.0)
    traj, rec = simulate_until_exit([0.5, 0.0], 0, spec, cfg)
    assert not rec.censored and traj.exited
    assert rec.tau == pytest.approx(math.log(2), abs=1e-3)
    np.testing.assert_allclose(rec.z, [1.0, 0.0], atol=1e-5)


def test_deterministic_euler_matches_ode():
    spec = builtin_model("ou-k1", {"theta": 1, "sigma": 0.0})
    cfg = SimConfig(eps=1.0, dt=1e-3, t_max=1.0)
    _, rec = simulate_until_exit([1.0], 0, spec, cfg)
    assert rec.censored
    assert rec.z[0] == pytest.approx(math.exp(-1), abs=2e-3)


def test_boundary_start_exits_immediately(tml):
    cfg = SimConfig(eps=0.1, dt=0.005, t_max=1.0)
    _, rec = simulate_until_exit([1.0, 0.0], 0, tml, cfg)
    assert rec.tau == 0.0 and not rec.censored


def test_step_without_switching_bookkeeping(tml):
    cfg = SimConfig(eps=0.1, dt=0.004, rate_bounds=(0.0, 0.0))
    state = HybridState(np.array([0.1, 0.2]), 1, 0.3, np.array([0.1, 0.2]))
    new = step(state, tml, cfg, trial_generator(0, 0))
    assert new.mode == 1
    np.testing.assert_allclose(new.r, [0.1, 0.204])
    assert new.t == pytest.approx(0.304)


def test_brownian_variance():
    spec = _brownian()
    eps, T = 0.3, 2.0
    cfg = SimConfig(eps=eps, dt=0.01, t_max=T, trials=10_000, seed=4)
    stats = simulate_batch(spec, cfg, [0.0], 0)
    assert stats.censored.all()
    var = stats.z[:, 0].var()
    assert abs(var / (eps * T) - 1) < 0.05


def test_occupation_identity(tml5):
    cfg = SimConfig(eps=0.2, deltahat=0.04, dt=0.01, trials=200, seed=1)
    stats = batch_exit_mc(tml5, cfg, [0.0, 0.0], 0)
    np.testing.assert_allclose(stats.r.sum(1), stats.tau, rtol=1e-12, atol=1e-12)


def test_mode_occupation_near_invariant_weights(tml):
    cfg = SimConfig(eps=0.05, deltahat=0.0025, dt=0.0025, t_max=4.0, trials=2000, seed=2)
    stats = simulate_batch(tml, cfg, [0.0, 0.0], 0)
    frac = stats.r.sum(0) / stats.tau.sum()
    np.testing.assert_allclose(frac, [0.5, 0.5], atol=0.03)


def test_geometry_and_single_mode_edges():
    ou = builtin_model("ou-k1", {"theta": 1, "radius": 1.0})
    cfg = SimConfig(eps=1.0, dt=0.01, trials=200, seed=3)
    stats = batch_exit_mc(ou, cfg, [0.0], 0)
    assert stats.prob_mode(0) == (1.0, 0.0)
    assert stats.prob_far([0.0], ou.diameter + 1)[0] == 0.0


def test_sharding_and_workers_are_invisible(tml5):
    base = dict(eps=0.2, deltahat=0.04, dt=0.01, trials=60, seed=9)
    a = simulate_batch(tml5, SimConfig(**base), [0.0, 0.0], 0)
    b = simulate_batch(tml5, SimConfig(shards=4, **base), [0.0, 0.0], 0)
    c = simulate_batch(tml5, SimConfig(shards=2, workers=2, **base), [0.0, 0.0], 0)
    for other in (b, c):
        np.testing.assert_array_equal(a.tau, other.tau)
        np.testing.assert_array_equal(a.z, other.z)
        np.testing.assert_array_equal(a.mode, other.mode)


def test_stream_bank_is_batch_independent():
    solo = StreamBank.for_trials(5, [3], 2)
    group = StreamBank.for_trials(5, [0, 1, 2, 3], 2)
    for _ in range(100):
        x = solo.normals(np.array([0]))
        y = group.normals(np.array([3]))
        np.testing.assert_array_equal(x[0], y[0])


def test_occupation_fractions_long_run():
    spec = builtin_model("two-mode-linear", {"c21": 3, "radius": 50.0})
    cfg = SimConfig(eps=0.01, deltahat=1e-4, dt=0.001, t_max=20.0, record=1, seed=11)
    traj, rec = simulate_until_exit([0.0, 0.0], 0, spec, cfg)
    assert rec.censored
    frac = occupation_fractions(traj)
    assert frac.sum() == 1.0
    np.testing.assert_allclose(frac, [0.75, 0.25], atol=0.02)


def test_thinning_bounds_cover_rates(tml5):
    xi = thinning_bounds(tml5)
    np.testing.assert_allclose(xi, [1.5, 7.5])


def _manual_record(T=2.0, mode=0):
    t = np.linspace(0.0, T, 11)
    z = np.zeros((11, 2))
    return TrajectoryRecord(t, z, np.full(11, mode), [], HybridState(z[-1], mode, T, np.array([T, 0.0])), False)


def test_likelihood_ratio_identity_and_no_event_formula(tml):
    rec = _manual_record()
    same = rate_schedule(tml, {"1->2": "1", "2->1": "1"})
    assert likelihood_ratio(rec, tml, same, 0.1) == pytest.approx(1.0, abs=1e-9)
    doubled = rate_schedule(tml, {"1->2": "2", "2->1": "2"})
    eps = 0.5
    assert likelihood_ratio(rec, tml, doubled, eps) == pytest.approx(math.exp(1.0 * 2.0 / eps), rel=1e-12)


def test_likelihood_ratio_jump_term(tml):
    t = np.array([0.0, 0.5, 1.0])
    z = np.zeros((3, 2))
    rec = TrajectoryRecord(t, z, np.array([0, 1, 1]), [SwitchEvent(0.5, 0, 1)],
                           HybridState(z[-1], 1, 1.0, np.array([0.5, 0.5])), False)
    ref = rate_schedule(tml, {"1->2": "3", "2->1": "1"})
    eps = 0.25
    expected = math.exp((2.0 * 0.5) / eps - math.log(3.0))
    assert likelihood_ratio(rec, tml, ref, eps) == pytest.approx(expected, rel=1e-12)


def test_recorded_trajectory_reproduces_weights(tml5):
    ref = rate_schedule(tml5, {"1->2": "2", "2->1": "4"})
    cfg = SimConfig(eps=0.2, deltahat=0.04, dt=0.01, record=1, rates=ref, seed=8)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        traj, rec = simulate_until_exit([0.0, 0.0], 0, tml5, cfg)
        stats = simulate_batch(tml5, SimConfig(eps=0.2, deltahat=0.04, dt=0.01, rates=ref, seed=8,
                                                 trials=1), [0.0, 0.0], 0)
    assert stats.tau[0] == pytest.approx(rec.tau)
    lr = likelihood_ratio(traj, tml5, ref, 0.2)
    assert stats.weights[0] == pytest.approx(lr, rel=1e-6)


def test_rate_schedule_validation(tml):
    with pytest.raises(ValueError):
        rate_schedule(tml, {"1->2": "1"})
    with pytest.raises(ValueError):
        rate_schedule(tml, {"1->1": "1", "2->1": "1"})
    sched = rate_schedule(tml, {"1->2": "1 + t", "2->1": 2})
    assert sched[(0, 1)] == parse_expr("1 + t", 2)
