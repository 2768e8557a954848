import json

import pytest

from transmute.cli import main

M5 = ["--model", "builtin:two-mode-linear", "--param", "c21=5"]


def _json(capsys):
    return json.loads(capsys.readouterr().out)


def test_validate(capsys):
    assert main(["validate", "--model", "builtin:two-mode-linear", "--seed", "0", "--samples", "200"]) == 0
    assert _json(capsys)["ok"] is True


def test_validate_failure_exit_code(tmp_path, capsys):
    model = tmp_path / "bad.json"
    from transmute import builtin_model
    d = builtin_model("two-mode-linear").to_dict()
    d["rates"]["1->2"] = "z1"
    model.write_text(json.dumps(d))
    assert main(["validate", "--model", str(model), "--seed", "0", "--samples", "100"]) == 1
    assert _json(capsys)["checks"]["rate_positivity"]["witnesses"]


def test_seed_is_mandatory_for_stochastic_commands():
    for cmd in (["validate"], ["ldp-verify", "--eps", "0.1"],
                ["simulate", "--eps", "0.2", "--out", "x"]):
        with pytest.raises(SystemExit) as info:
            main(cmd + ["--model", "builtin:two-mode-linear"])
        assert info.value.code == 2


def test_bad_model_reports_error(capsys):
    assert main(["validate", "--model", "builtin:nosuchmodel", "--seed", "0"]) == 2
    assert "nosuchmodel" in capsys.readouterr().err


def test_simulate_and_exit_stats(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("TRANSMUTE_OUTPUT_DIR", str(tmp_path))
    args = ["simulate", *M5, "--eps", "0.2", "--seed", "4", "--trials", "50", "--z0", "0,0", "--out", "sim"]
    assert main(args) == 0
    capsys.readouterr()
    table = tmp_path / "sim" / "exits.csv"
    first = table.read_bytes()
    assert first.splitlines()[0] == b"tau,z1,z2,mode,r1,r2"
    assert main(args) == 0
    assert table.read_bytes() == first
    capsys.readouterr()
    assert main(["exit-stats", "--exits", str(table), "--z-bar", "0.81,0.58", "--delta", "10"]) == 0
    rep = _json(capsys)
    assert rep["rows"] == 50
    assert list(rep["prob_far"].values()) == [0.0]


def test_simulate_with_status(tmp_path, capsys):
    out = tmp_path / "s"
    assert main(["simulate", *M5, "--eps", "0.2", "--seed", "1", "--trials", "20", "--z0", "0,0",
                 "--with-status", "--rates", '{"1->2": "2", "2->1": "4"}', "--out", str(out)]) == 0
    header = (out / "exits.csv").read_text().splitlines()[0]
    assert header.startswith("tau,z1,z2,mode,r1,r2,")
    capsys.readouterr()
    assert main(["exit-stats", "--exits", str(out / "exits.csv")]) == 0
    assert _json(capsys)["mean_occupation"]


def test_flow_and_action(tmp_path, capsys):
    model = ["--model", "builtin:ou-k1", "--param", "theta=1"]
    flow = tmp_path / "flow.csv"
    assert main(["averaged-flow", *model, "--z0", "0.5", "--T", "1", "--out", str(flow)]) == 0
    assert main(["action", *model, "--eps", "0.1", "--path", str(flow), "--mode", "I"]) == 0
    assert float(_json(capsys)["value"]) <= 1e-4
    assert main(["action", *model, "--eps", "0.1", "--path", str(flow), "--mode", "S"]) == 2


def test_ldp_verify(capsys):
    assert main(["ldp-verify", *M5, "--eps", "0.1", "--samples", "50", "--seed", "0"]) == 0
    assert _json(capsys)["passed"] is True


def test_dirichlet_commands(tmp_path, capsys):
    out = tmp_path / "pde.csv"
    assert main(["dirichlet", *M5, "--eps", "0.3", "--h", "0.05", "--out", str(out)]) == 0
    rep = _json(capsys)
    assert rep["min"] >= 0 and rep["max"] <= 1
    assert out.read_text().splitlines()[0] == "z1,z2,kind,u1,u2"
    assert main(["dirichlet-sweep", *M5, "--eps-list", "0.4,0.2", "--probe", "0,0", "--h", "0.05",
                 "--expected", "1"]) == 0
    rows = _json(capsys)["rows"]
    assert [r["eps"] for r in rows] == [0.4, 0.2]


def test_run_verify_emit(tmp_path, capsys):
    cfg = tmp_path / "exp.toml"
    cfg.write_text(
        '[experiment]\nmodel = { builtin = "two-mode-linear", params = { c21 = 5 } }\nseed = 2\n'
        'stages = ["exits"]\n'
        '[exits]\neps = [0.4, 0.2, 0.1]\ntrials = 40\nz0 = [0.0, 0.0]\n'
    )
    assert main(["run", str(cfg), "--output-dir", str(tmp_path / "out")]) == 0
    capsys.readouterr()
    man = tmp_path / "out" / "manifest.json"
    assert main(["verify-prop2", str(man)]) == 2  # no quasipotential profile
    assert main(["emit", str(man), "--format", "json", "--out-dir", str(tmp_path / "em")]) == 0
    assert (tmp_path / "em" / "exits_eps0.1.json").exists()


def test_run_rejects_broken_config(tmp_path, capsys):
    cfg = tmp_path / "exp.toml"
    cfg.write_text('[experiment]\nmodel = "missing.toml"\nseed = 1\nstages = ["exits"]\n')
    assert main(["run", str(cfg), "--output-dir", str(tmp_path / "out")]) == 2
    assert "experiment.model" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()
