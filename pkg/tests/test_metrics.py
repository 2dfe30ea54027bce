import math

import numpy as np
import pytest

from potential_marl.approx import ConstantModel, GaussianPolicy
from potential_marl.envs import AblationConfig, ablate, cournot_game
from potential_marl.game import rollout
from potential_marl.metrics import CSV_HEADER, MetricsRow, analytic_exploitability, exploitability, ne_gap, social_welfare


def fixed(values):
    return [GaussianPolicy(ConstantModel(1, [v]), 0.1, [-1.0], [1.0], "none") for v in values]


def test_exploitability_zero_at_ne():
    res = exploitability(cournot_game(), fixed([1 / 3, 1 / 3]))
    assert res.method == "analytic"
    assert abs(res.delta) < 1e-12


def test_exploitability_closed_form_off_ne():
    # others at 0 -> best response 0.5 earns 0.25; playing 0 earns 0
    res = analytic_exploitability(cournot_game(), fixed([0.0, 0.0]))
    assert res.gains == pytest.approx([0.25, 0.25])


def test_ne_gap():
    g = cournot_game()
    assert ne_gap(g, fixed([0.3, 0.4])) == pytest.approx(1 / 15)
    assert math.isnan(ne_gap(ablate(AblationConfig(g, "non_potential", 0.3)), fixed([0.3, 0.4])))


def test_social_welfare(rng):
    g = cournot_game()
    traj = rollout(g, fixed([1 / 3, 1 / 3]), 4, rng, deterministic=True)
    assert social_welfare(traj) == pytest.approx(2 / 9)
    with pytest.raises(ValueError):
        social_welfare([])


def row(**kw):
    base = dict(run_id="r", seed=0, env="e", algo="a", iteration=1, episodes=1, social_welfare=1.0, exploitability=0.1, ne_gap=0.0, potential_residual=0.0, wall_ms=0)
    return MetricsRow(**{**base, **kw})


def test_metrics_row_validation():
    row(ne_gap=float("nan"), exploitability=float("nan"))
    with pytest.raises(ValueError):
        row(social_welfare=float("nan"))
    with pytest.raises(ValueError):
        row(exploitability=float("inf"))


def test_csv_line_roundtrips_floats():
    r = row(social_welfare=0.1 + 0.2)
    fields = r.to_csv_line().strip().split(",")
    assert len(fields) == len(CSV_HEADER.split(","))
    assert float(fields[6]) == 0.1 + 0.2
