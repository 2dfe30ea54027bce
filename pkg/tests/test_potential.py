from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from potential_marl.approx import ConstantModel, GaussianPolicy
from potential_marl.envs import CournotParams, braess_network, cournot_game, routing_game
from potential_marl.game import ReplayBuffer, rollout
from potential_marl.potential import (
    AnalyticPotential,
    PotentialEstimationError,
    PotentialModel,
    ResidualConfig,
    consensus_init,
    consensus_round,
    draw_probes,
    estimate_potential,
    estimate_potential_consensus,
    gradient_loss_and_grad,
    difference_loss_and_grad,
    metropolis_weights,
    nascent_bound_probe,
    potential_from_dict,
    reference_point,
    residual_gi,
    reward_grad_source,
    reward_value_source,
    topology_adjacency,
)

from conftest import fd_grad, rel_err

COURNOT = cournot_game()


def exact_cournot_model(game=COURNOT):
    m = PotentialModel.poly(game)
    x = np.random.default_rng(0).uniform(-1, 1, size=(60, game.state_dim + game.total_action_dim))
    x[:, : game.state_dim] = 0.0
    m.body.fit_least_squares(x, game.analytic_potential(x[:, : game.state_dim], x[:, game.state_dim :]))
    return m


def test_loss_zero_at_true_potential(rng):
    cfg = ResidualConfig()
    probes = draw_probes(COURNOT, cfg, rng)
    loss, grad = gradient_loss_and_grad(COURNOT, exact_cournot_model(), probes, cfg, reward_grad_source(COURNOT))
    assert loss < 1e-20 and np.max(np.abs(grad)) < 1e-10


@pytest.mark.parametrize("body", ["poly", "dense"])
def test_gradient_loss_grad_matches_fd(rng, body):
    game = cournot_game(CournotParams(n_agents=3))
    cfg = ResidualConfig(batch=4, mc_actions=3, body=body)
    model = PotentialModel.poly(game) if body == "poly" else PotentialModel.dense(game, rng, (5,))
    model.set_params(rng.normal(size=model.n_params) * 0.3)
    probes = draw_probes(game, cfg, rng)
    grads = reward_grad_source(game)
    _, g = gradient_loss_and_grad(game, model, probes, cfg, grads)
    p0 = model.get_params()

    def loss(p):
        model.set_params(p)
        return gradient_loss_and_grad(game, model, probes, cfg, grads)[0]

    fd = fd_grad(loss, p0, h=1e-6)
    assert rel_err(g, fd) < 1e-4


def test_difference_loss_grad_matches_fd(rng):
    cfg = ResidualConfig(mode="difference", batch=8)
    model = PotentialModel.poly(COURNOT)
    model.set_params(rng.normal(size=model.n_params))
    probes = draw_probes(COURNOT, cfg, rng)
    vals = reward_value_source(COURNOT)
    _, g = difference_loss_and_grad(COURNOT, model, probes, cfg, vals)
    p0 = model.get_params()

    def loss(p):
        model.set_params(p)
        return difference_loss_and_grad(COURNOT, model, probes, cfg, vals)[0]

    assert rel_err(g, fd_grad(loss, p0)) < 1e-6


@pytest.mark.parametrize("mode", ["gradient", "difference"])
def test_estimate_recovers_cournot(rng, mode):
    res = estimate_potential(COURNOT, ResidualConfig(mode=mode, iterations=4000), rng)
    tab = res.model.coefficient_table(COURNOT)
    for name, want in (("a0", 1.0), ("a1", 1.0), ("a0^2", -1.0), ("a1^2", -1.0), ("a0*a1", -1.0)):
        assert tab[name] == pytest.approx(want, rel=0.02), name
    s0, a0 = reference_point(COURNOT)
    assert abs(res.model.value(s0, a0)[0]) < 1e-12


def test_estimate_from_buffer_without_grad_oracle(rng):
    game = replace(COURNOT, reward_grad_oracle=None)
    pols = [GaussianPolicy(ConstantModel(1, [0.0]), 1.0, [-1.0], [1.0]) for _ in range(2)]
    buf = ReplayBuffer.for_game(game, 2000)
    buf.extend(rollout(game, pols, 2000, rng))
    res = estimate_potential(game, ResidualConfig(iterations=2000), rng, buffer=buf)
    tab = res.model.coefficient_table(game)
    assert tab["a0*a1"] == pytest.approx(-1.0, abs=0.05)


def test_no_reward_source_raises():
    with pytest.raises(ValueError):
        reward_grad_source(replace(COURNOT, reward_grad_oracle=None))


def test_divergence_raises(rng):
    cfg = ResidualConfig(optimizer="sgd", lr=50.0, clip_norm=None, body="dense", hidden=(8,), divergence=1e3, iterations=200)
    with pytest.raises(PotentialEstimationError) as exc:
        estimate_potential(COURNOT, cfg, rng)
    assert "iteration" in exc.value.diagnostics


def test_routing_residual_zero_without_state_block(rng):
    g = routing_game(braess_network())
    pols = [GaussianPolicy(ConstantModel(g.state_dim, rng.normal(size=5)), 0.5, g.agent_low(i), g.agent_high(i)) for i in range(2)]
    s = g.initial_state_sampler(rng)
    truth = AnalyticPotential(g)
    off = residual_gi(g, 0, s, pols, truth, ResidualConfig(include_state=False, mc_actions=16), rng)
    on = residual_gi(g, 0, s, pols, truth, ResidualConfig(include_state=True, mc_actions=16), rng)
    assert np.max(np.abs(off)) < 1e-12
    assert np.max(np.abs(on)) > 1e-6


def test_model_serialisation(rng):
    m = exact_cournot_model()
    m.canonicalize(*reference_point(COURNOT))
    back = potential_from_dict(m.to_dict())
    s, a = COURNOT.sample_probes(rng, 10)
    np.testing.assert_allclose(back.value(s, a), m.value(s, a), atol=1e-14)


def test_config_validation():
    with pytest.raises(ValueError):
        ResidualConfig(mc_actions=0)
    with pytest.raises(ValueError):
        ResidualConfig(mode="other")


@given(st.integers(2, 7), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_metropolis_is_doubly_stochastic(n, seed):
    r = np.random.default_rng(seed)
    adj = r.random((n, n)) < 0.5
    adj = adj | adj.T
    for i in range(n - 1):  # keep it connected
        adj[i, i + 1] = adj[i + 1, i] = True
    C = metropolis_weights(topology_adjacency(adj, n))
    np.testing.assert_allclose(C.sum(axis=0), 1.0, atol=1e-12)
    np.testing.assert_allclose(C.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(C >= 0)


def test_disconnected_graph_rejected():
    adj = np.zeros((3, 3), dtype=bool)
    adj[0, 1] = adj[1, 0] = True
    with pytest.raises(ValueError):
        topology_adjacency(adj, 3)
    with pytest.raises(ValueError):
        topology_adjacency("star", 3)


def test_gradient_tracking_identity(rng):
    N, P = 4, 3
    targets = rng.normal(size=(N, P))
    oracles = [lambda x, t=t: x - t for t in targets]
    C = metropolis_weights(topology_adjacency("ring", N))
    st_ = consensus_init(np.zeros((N, P)), C, 0.1, oracles)
    for _ in range(300):
        st_ = consensus_round(st_, oracles)
        assert st_.tracking_error() < 1e-12
    # the sum of quadratics is minimised at the mean target
    np.testing.assert_allclose(st_.rho, np.tile(targets.mean(axis=0), (N, 1)), atol=1e-6)


def test_single_agent_consensus_is_gradient_descent(rng):
    game = cournot_game(CournotParams(n_agents=1))
    cfg = ResidualConfig(fixed_probes=True, optimizer="sgd", lr=1e-2, clip_norm=None, grad_tol=0.0, iterations=200)
    cen = estimate_potential(game, cfg, np.random.default_rng(3))
    dec = estimate_potential_consensus(game, cfg, np.random.default_rng(3), "ring", alpha=1e-2, rounds=200, agree_tol=0.0)
    np.testing.assert_allclose(dec.models[0].get_params(), cen.model.get_params(), atol=1e-12)


def test_nascent_probe_linear_f_has_no_gap(rng):
    table = nascent_bound_probe(COURNOT, lambda s, a: a @ np.array([1.0, -2.0]), [0.5, 0.1], rng, n_samples=500, clip=False)
    assert all(row["gap"] < 1e-12 for row in table)
    with pytest.raises(ValueError):
        nascent_bound_probe(COURNOT, lambda s, a: a[:, 0], [0.0], rng)
