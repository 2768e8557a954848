import json

import numpy as np
import pytest

from transmute import ModelConfigError, builtin_model, load_model, model_from_dict, validate_model


def _tml_dict(**over):
    d = builtin_model("two-mode-linear").to_dict()
    d.update(over)
    return d


def test_two_mode_linear_registry(tml):
    assert (tml.n, tml.m, tml.K) == (1, 1, 2)
    assert tml.F[0].source == "z2"
    assert [f[0].source for f in tml.f] == ["-(z2-1)", "-(z2+1)"]
    assert all(s[0][0].source == "1" for s in tml.sigma)
    np.testing.assert_allclose(tml.rate_matrix([0.3, 0.1]), [[-1, 1], [1, -1]])
    assert tml.inside(np.array([0.0, 0.0])) and not tml.inside(np.array([1.0, 0.1]))


def test_ou_k1_registry(ou):
    assert (ou.K, ou.n, ou.m) == (1, 0, 1)
    assert ou.f[0][0].source == "-z1"
    assert ou.sigma[0][0][0].source == "1"


def test_unknown_builtin():
    with pytest.raises(ModelConfigError) as info:
        builtin_model("nosuchmodel")
    assert info.value.key == "builtin"


def test_builtin_param_errors():
    with pytest.raises(ModelConfigError, match="params.theta"):
        builtin_model("ou-k1")
    with pytest.raises(ModelConfigError, match="params.bogus"):
        builtin_model("two-mode-linear", {"bogus": 1})


def test_reference_model_validates(tml):
    rep = validate_model(tml, samples=1000, seed=0)
    assert rep.ok, rep.to_dict()
    assert set(rep.checks) == {"rate_positivity", "ellipticity", "domain_bounded"}


def test_rate_positivity_failure_has_witness():
    d = _tml_dict()
    d["rates"] = {"1->2": "z1", "2->1": "1"}
    rep = validate_model(model_from_dict(d), samples=200, seed=1)
    chk = rep.checks["rate_positivity"]
    assert not chk.passed and chk.witnesses
    assert all(w[0] <= 0 for w in chk.witnesses)


def test_ellipticity_failure():
    d = _tml_dict()
    d["modes"]["1"]["sigma"] = [["0"]]
    rep = validate_model(model_from_dict(d), samples=200, seed=1)
    assert not rep.checks["ellipticity"].passed
    assert rep.checks["rate_positivity"].passed


def test_unbounded_domain_detected():
    d = _tml_dict()
    d["domain"] = {"level_set": "z1 - 10", "box": [[-1, 1], [-1, 1]]}
    rep = validate_model(model_from_dict(d), samples=100, seed=0)
    assert not rep.checks["domain_bounded"].passed


@pytest.mark.parametrize(
    "mutate, key",
    [
        (lambda d: d["modes"].pop("2"), "modes.2"),
        (lambda d: d["rates"].pop("2->1"), "rates.2->1"),
        (lambda d: d["modes"]["1"].__setitem__("f", ["z1", "z2"]), "modes.1.f"),
        (lambda d: d["domain"].__setitem__("box", [[0, -1], [0, 1]]), "domain.box"),
        (lambda d: d["drift"].__setitem__("F", ["2*+"]), "drift.F[0]"),
        (lambda d: d["boundary"].__setitem__("g", ["1"]), "boundary.g"),
    ],
)
def test_config_errors_name_the_key(mutate, key):
    d = json.loads(json.dumps(_tml_dict()))
    mutate(d)
    with pytest.raises(ModelConfigError) as info:
        model_from_dict(d)
    assert info.value.key == key


def test_load_toml_and_json(tmp_path, tml):
    toml = tmp_path / "m.toml"
    toml.write_text('builtin = "two-mode-linear"\n[params]\nc21 = 3\n')
    spec = load_model(toml)
    np.testing.assert_allclose(spec.rate_matrix([0, 0]), [[-1, 1], [3, -3]])
    js = tmp_path / "m.json"
    js.write_text(json.dumps(tml.to_dict()))
    again = load_model(js)
    np.testing.assert_allclose(again.drifts([0.2, 0.3]), tml.drifts([0.2, 0.3]))
    with pytest.raises(ModelConfigError):
        load_model(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("dims = [")
    with pytest.raises(ModelConfigError):
        load_model(bad)


def test_coefficient_shapes(tml, rng):
    z = rng.uniform(-0.5, 0.5, size=(7, 2))
    assert tml.drifts(z).shape == (7, 2, 2)
    np.testing.assert_allclose(tml.drifts(z)[:, 0], np.stack([z[:, 1], 1 - z[:, 1]], 1))
    a = tml.full_diffusion(z, ratio=0.25)
    assert a.shape == (7, 2, 2, 2)
    np.testing.assert_allclose(a[0, 1], [[0.25, 0], [0, 1]])
    np.testing.assert_allclose(tml.normal(np.array([0.6, 0.8])), [0.6, 0.8], atol=1e-8)
