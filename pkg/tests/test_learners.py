import numpy as np
import pytest

from potential_marl.approx import ConstantModel, GaussianPolicy, OptimizerState
from potential_marl.envs import cournot_game
from potential_marl.learners import (
    ActorSet,
    CriticModel,
    TrainConfig,
    actor_update,
    critic_fit,
    spotq_target,
    train_best_response,
    train_independent,
    train_spotac,
    train_spotq_tabular,
)
from potential_marl.tabular import random_potential_mdp, value_iteration

FAST = dict(steps=1500, warmup=128, batch=64, hidden=(32, 32), actor_hidden=(32, 32), eval_every=500, eval_episodes=2, use_analytic_potential=True)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(gamma=1.0)
    with pytest.raises(ValueError):
        TrainConfig(tau=0.0)
    with pytest.raises(ValueError):
        TrainConfig(max_proxy="other")


def test_spotq_target_terminal_and_bootstrap(rng):
    critic = CriticModel.create(3, (4,), rng)
    phi = np.array([1.0, 2.0])
    s2 = rng.normal(size=(2, 1))
    a2 = rng.normal(size=(2, 2))
    y = spotq_target(phi, s2, np.array([True, False]), critic, 0.9, a2)
    assert y[0] == 1.0
    assert y[1] == pytest.approx(2.0 + 0.9 * critic.target_value(s2[1:], a2[1:])[0])
    np.testing.assert_array_equal(spotq_target(phi, s2, np.array([False, False]), critic, 0.0), phi)
    with pytest.raises(ValueError):
        spotq_target(phi, s2, np.array([False, False]), critic, 0.9)


def test_critic_fit_reduces_loss(rng):
    critic = CriticModel.create(2, (16,), rng, tau=1.0)
    s, a = rng.normal(size=(64, 1)), rng.normal(size=(64, 1))
    y = s[:, 0] - a[:, 0] ** 2
    opt = OptimizerState("adam", 1e-2)
    first = critic_fit(critic, s, a, y, opt)
    for _ in range(300):
        last = critic_fit(critic, s, a, y, opt)
    assert last < 0.2 * first
    np.testing.assert_array_equal(critic.net.get_params(), critic.target.get_params())
    with pytest.raises(ValueError):
        critic_fit(critic, s[:0], a[:0], y[:0], opt)


class _Bowl:
    """F = -(a - 0.5)^2 summed over action columns."""

    def action_grad(self, s, a):
        return -2.0 * (a - 0.5)


def test_actor_update_ascends(rng):
    pol = GaussianPolicy(ConstantModel(1, [0.0]), 0.1, [-1.0], [1.0])
    opt = OptimizerState("adam", 0.05)
    s = np.zeros((8, 1))
    for _ in range(300):
        actor_update(pol, _Bowl(), s, np.zeros((8, 1)), opt, slice(0, 1))
    assert pol.mean_action(np.zeros((1, 1)))[0, 0] == pytest.approx(0.5, abs=1e-2)


def test_actor_set_roundtrip(rng):
    g = cournot_game()
    res = train_spotac(g, TrainConfig(**{**FAST, "steps": 200}), rng)
    back = ActorSet.from_dict(res.actors.to_dict())
    s = np.zeros((3, 1))
    np.testing.assert_array_equal(back.deterministic(s), res.actors.deterministic(s))


def test_spotac_cournot_moves_to_ne():
    g = cournot_game()
    res = train_spotac(g, TrainConfig(**FAST), np.random.default_rng(0))
    assert res.trace[-1]["ne_gap"] < 0.1
    assert res.trace[-1]["potential_residual"] < 1e-12
    assert [r["steps"] for r in res.trace] == [500, 1000, 1500]


def test_training_is_deterministic():
    g = cournot_game()
    cfg = TrainConfig(**{**FAST, "steps": 400})
    a = train_spotac(g, cfg, np.random.default_rng(5))
    b = train_spotac(g, cfg, np.random.default_rng(5))
    for x, y in zip(a.actors.actors, b.actors.actors):
        np.testing.assert_array_equal(x.get_params(), y.get_params())


def test_independent_runs():
    res = train_independent(cournot_game(), TrainConfig(**{**FAST, "steps": 600}), np.random.default_rng(1))
    assert len(res.critics) == 2 and res.potential is None


def test_best_response_finds_gain():
    g = cournot_game()
    frozen = ActorSet([GaussianPolicy(ConstantModel(1, [v]), 0.05, [-1.0], [1.0], "none") for v in (0.0, 0.0)])
    br = train_best_response(g, frozen, 0, TrainConfig(**{**FAST, "steps": 1500, "lr_actor": 1e-3}), np.random.default_rng(0), eval_episodes=4)
    # others at 0: best response 0.5 earns 0.25, current action earns 0
    assert br.current_value == pytest.approx(0.0, abs=1e-12)
    assert 0.2 < br.gain <= 0.25 + 1e-9


def test_tabular_fitted_q_matches_value_iteration(rng):
    mdp = random_potential_mdp(rng)
    res = train_spotq_tabular(mdp, tol=1e-12)
    vi = value_iteration(mdp, tol=1e-12)
    np.testing.assert_allclose(res.Q, vi.Q, atol=1e-9)
    np.testing.assert_array_equal(res.greedy(np.arange(mdp.n_states)), vi.policy)
