import csv
import json

import numpy as np
import pytest

from potential_marl.config import parse_config
from potential_marl.harness import UnknownEnvError, build_game, run_experiment, substream

FAST = """
[env]
name = cournot
{env_extra}

[algo]
steps = 300
warmup = 64
batch = 32
hidden = [16, 16]
actor_hidden = [16, 16]
use_analytic_potential = true

[eval]
eval_every = 150
eval_episodes = 2
exploitability_budget = 100

[run]
seeds = {seeds}
record_wall_time = {wall}
{extra}
"""


def cfg_text(seeds="[7]", wall="false", env_extra="", extra=""):
    return FAST.format(seeds=seeds, wall=wall, env_extra=env_extra, extra=extra)


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_same_seed_gives_identical_csv(tmp_path):
    cfg = parse_config(cfg_text())
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_numeric_columns_match_with_wall_time(tmp_path):
    cfg = parse_config(cfg_text(wall="true"))
    a = read_rows(run_experiment(cfg, tmp_path / "a").out_dir / "metrics.csv")
    b = read_rows(run_experiment(cfg, tmp_path / "b").out_dir / "metrics.csv")
    for x, y in zip(a, b):
        x.pop("wall_ms"), y.pop("wall_ms")
        assert x == y


def test_artifacts_and_schema(tmp_path):
    res = run_experiment(parse_config(cfg_text(seeds="[1, 2]")), tmp_path)
    rows = read_rows(tmp_path / "metrics.csv")
    assert list(rows[0]) == ["run_id", "seed", "env", "algo", "iteration", "episodes", "social_welfare", "exploitability", "ne_gap", "potential_residual", "wall_ms"]
    assert len(rows) == 4  # two eval points per seed
    # exploitability is measured once, at the end of each run
    assert [r["exploitability"] == "nan" for r in rows] == [True, False, True, False]
    events = [json.loads(line) for line in (tmp_path / "events.jsonl").read_text().splitlines()]
    assert [e["event"] for e in events].count("run_end") == 2
    report = json.loads((tmp_path / "potential_report.json").read_text())
    assert set(report) == {r.run_id for r in res.runs}
    assert all(v["potentiality_check"]["pass"] for v in report.values())
    assert (tmp_path / "checkpoints" / res.runs[0].run_id / "actors.json").exists()


def test_sweep_writes_six_groups(tmp_path):
    text = cfg_text(env_extra="ablation = non_potential", extra="[sweep]\nkey = env.c\nvalues = [0, 0.1, 0.2, 0.3, 0.4, 0.5]")
    text = text.replace("steps = 300", "steps = 150").replace("eval_every = 150", "eval_every = 150")
    run_experiment(parse_config(text), tmp_path)
    rows = read_rows(tmp_path / "metrics.csv")
    assert len({r["run_id"] for r in rows}) == 6
    assert len({r["env"] for r in rows}) == 6


def test_unknown_env():
    with pytest.raises(UnknownEnvError) as exc:
        build_game(parse_config("[env]\nname = grid\n").env)
    assert "cournot" in str(exc.value) and "braess" in str(exc.value)


@pytest.mark.parametrize("text", ["[env]\nname = braess\n", "[env]\nname = routing\nnetwork = random\nlayers = 5\nwidth = 6\n", "[env]\nname = nav\n", "[env]\nname = braess\nteam = true\n"])
def test_build_game_variants(text):
    g = build_game(parse_config(text).env)
    assert g.n_agents >= 2


def test_substreams_are_independent_and_reproducible():
    a = substream(3, "policy").random(4)
    np.testing.assert_array_equal(a, substream(3, "policy").random(4))
    assert not np.allclose(a, substream(3, "env").random(4))
    assert not np.allclose(a, substream(4, "policy").random(4))
