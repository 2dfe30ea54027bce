import json

import pytest

from potential_marl.cli import main


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text(
        "[env]\nname = cournot\n\n[algo]\nsteps = 200\nwarmup = 64\nbatch = 32\nhidden = [16]\nactor_hidden = [16]\n"
        "use_analytic_potential = true\nresidual_iterations = 1500\n\n[eval]\neval_every = 100\neval_episodes = 2\nexploitability_budget = 100\n\n[run]\nseeds = [0]\n"
    )
    return p


def test_train_and_exploitability(tmp_path, cfg_file, capsys):
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg_file), "--seed", "3", "--out", str(out)]) == 0
    assert "cournot-spotac-s3" in capsys.readouterr().out
    actors = out / "checkpoints" / "cournot-spotac-s3" / "actors.json"
    assert main(["exploitability", "--config", str(cfg_file), "--actors", str(actors)]) == 0
    assert json.loads(capsys.readouterr().out)["method"] == "analytic"


def test_estimate_then_check(tmp_path, cfg_file, capsys):
    out = tmp_path / "est"
    assert main(["estimate-potential", "--config", str(cfg_file), "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["check-potential", "--config", str(cfg_file), "--potential", str(out / "potential.json"), "--tol", "1e-3"]) == 0
    assert json.loads(capsys.readouterr().out)["potentiality"]["pass"]


def test_check_fails_for_non_potential(tmp_path, capsys):
    p = tmp_path / "np.ini"
    p.write_text("[env]\nname = cournot\nablation = non_potential\nc = 0.5\n")
    assert main(["check-potential", "--config", str(p)]) == 1


def test_unknown_env_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[env]\nname = grid\n")
    assert main(["train", "--config", str(p), "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "available" in err and "cournot" in err


def test_bad_config_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[algo]\ngamma = 1.5\n")
    assert main(["train", "--config", str(p)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_sweep_requires_section(cfg_file, capsys):
    assert main(["sweep", "--config", str(cfg_file)]) == 2


def test_oracle(cfg_file, capsys):
    assert main(["oracle", "--config", str(cfg_file)]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["value_iteration"]["mpe_certified"]
