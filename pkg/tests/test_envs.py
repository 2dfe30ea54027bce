import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from potential_marl.envs import (
    AblationConfig,
    CournotParams,
    NavParams,
    ablate,
    best_response_dynamics,
    braess_network,
    cournot_game,
    flow_equilibrium,
    load_network,
    nav_game,
    random_layered_network,
    routing_game,
    team_game,
)
from potential_marl.envs.routing import RoutingNet, path_shares, step_splits
from potential_marl.game import check_potentiality, check_state_transitivity

from conftest import fd_grad, rel_err


def all_games():
    cournot = cournot_game(CournotParams(n_agents=3))
    return {
        "cournot3": cournot,
        "braess": routing_game(braess_network()),
        "random_routing": routing_game(random_layered_network(4, 3, seed=2, n_agents=3)),
        "nav": nav_game(NavParams(n_agents=3)),
        "noncoop": ablate(AblationConfig(cournot, "noncoop_potential", 0.4)),
        "nonpot": ablate(AblationConfig(cournot, "non_potential", 0.4)),
        "team": team_game(cournot),
    }


GAMES = all_games()


def test_cournot_reference_values():
    g = cournot_game()
    a = np.array([1 / 3, 1 / 3])
    np.testing.assert_allclose(g.rewards(np.zeros(1), a), [1 / 9, 1 / 9], atol=1e-15)
    assert g.potential(np.zeros(1), a) == pytest.approx(1 / 3, abs=1e-15)
    np.testing.assert_allclose(g.analytic_ne, [1 / 3, 1 / 3])


@pytest.mark.parametrize("n", [2, 3, 4, 6])
def test_best_response_dynamics_reach_symmetric_ne(n):
    p = CournotParams(n_agents=n)
    np.testing.assert_allclose(best_response_dynamics(p), p.symmetric_ne(), atol=1e-10)


def test_cournot_ne_outside_box_is_none():
    assert cournot_game(CournotParams(alpha=10.0, caps=1.0)).analytic_ne is None


@pytest.mark.parametrize("name", [k for k in GAMES if k != "nonpot"])
def test_potentiality_holds(name, rng):
    assert check_potentiality(GAMES[name], None, 500, 1e-9, rng).passed


def test_non_potential_ablation_fails(rng):
    assert not check_potentiality(GAMES["nonpot"], None, 500, 1e-9, rng).passed


@pytest.mark.parametrize("name", list(GAMES))
def test_reward_grads_match_fd(name, rng):
    g = GAMES[name]
    s, a = g.sample_probes(rng, 3)
    da, ds = g.reward_grad_oracle(s, a)
    for b in range(3):
        for i in range(g.n_agents):
            fa = fd_grad(lambda x: g.reward_oracle(s[b : b + 1], x[None])[0, i], a[b])
            fs = fd_grad(lambda x: g.reward_oracle(x[None], a[b : b + 1])[0, i], s[b])
            assert rel_err(da[b, i], fa) < 1e-6
            assert rel_err(ds[b, i], fs) < 1e-6


@pytest.mark.parametrize("name", [k for k in GAMES if GAMES[k].potential_grad is not None])
def test_potential_grads_match_fd(name, rng):
    g = GAMES[name]
    s, a = g.sample_probes(rng, 3)
    da, ds = g.potential_grad(s, a)
    for b in range(3):
        assert rel_err(da[b], fd_grad(lambda x: g.analytic_potential(s[b : b + 1], x[None])[0], a[b])) < 1e-6
        assert rel_err(ds[b], fd_grad(lambda x: g.analytic_potential(x[None], a[b : b + 1])[0], s[b])) < 1e-6


def test_nav_is_not_state_transitive(rng):
    rep = check_state_transitivity(GAMES["nav"], None, 200, 1e-9, rng)
    assert not rep.passed


def test_nav_params_validated():
    with pytest.raises(ValueError):
        NavParams(M=np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        NavParams(eps=0.0)


def test_ablation_zero_is_base(rng):
    g = ablate(AblationConfig(GAMES["cournot3"], "non_potential", 0.0))
    s, a = g.sample_probes(rng, 10)
    np.testing.assert_array_equal(g.reward_oracle(s, a), GAMES["cournot3"].reward_oracle(s, a))


def test_ablation_validates():
    with pytest.raises(ValueError):
        AblationConfig(GAMES["cournot3"], "non_potential", -0.1)
    with pytest.raises(ValueError):
        AblationConfig(GAMES["cournot3"], "other", 0.1)


@given(st.floats(0.0, 3.0), st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_noncoop_ablation_stays_potential(c, seed):
    g = ablate(AblationConfig(cournot_game(), "noncoop_potential", c))
    assert check_potentiality(g, None, 100, 1e-9, np.random.default_rng(seed)).passed


def test_braess_paths_and_horizon():
    net = braess_network()
    assert net.paths() == [[0, 2], [0, 3, 4], [1, 4]]
    assert net.horizon == 3


def test_network_json_roundtrip(tmp_path):
    net = random_layered_network(5, 6, seed=0)
    assert len(net.nodes) == 20
    (tmp_path / "n.json").write_text(json.dumps(net.to_json()))
    back = load_network(tmp_path / "n.json")
    assert back.edges == net.edges and back.demands == net.demands


def test_network_validation():
    with pytest.raises(ValueError):
        RoutingNet(["s", "t"], [("s", "x", 1.0, 0.0)], "s", "t")
    with pytest.raises(ValueError):
        RoutingNet(["s", "t"], [("s", "t", -1.0, 0.0)], "s", "t")
    with pytest.raises(ValueError):
        RoutingNet(["s", "m", "t"], [("s", "t", 1.0, 0.0), ("s", "m", 1.0, 0.0)], "s", "t")


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_routing_conserves_mass(seed):
    r = np.random.default_rng(seed)
    g = routing_game(random_layered_network(4, 3, seed=seed % 7, n_agents=2))
    s = g.initial_state_sampler(r)
    for _ in range(g.horizon):
        s = g.step(s, g.sample_actions(r, 1)[0], r)
        np.testing.assert_allclose(s.reshape(2, -1).sum(axis=1), g.meta["net"].demands, atol=1e-12)
    assert g.is_done(s)


def test_path_shares_uniform_logits():
    g = routing_game(braess_network())
    s = g.initial_state_sampler(None)
    splits = []
    for _ in range(g.horizon):
        a = np.zeros(g.total_action_dim)
        splits.append(step_splits(g, s, a))
        s = g.step(s, a, None)
    np.testing.assert_allclose(path_shares(g.meta["net"], splits), [0.25, 0.25, 0.5])


def test_flow_equilibrium_oracles():
    net = braess_network()
    np.testing.assert_allclose(flow_equilibrium(net, "wardrop").shares(), [0, 1, 0], atol=1e-6)
    np.testing.assert_allclose(flow_equilibrium(net.without_edge("A", "B"), "wardrop").shares(), [0.5, 0.5], atol=1e-6)
    np.testing.assert_allclose(flow_equilibrium(net, "atomic").shares(), [1 / 3, 1 / 3, 1 / 3], atol=1e-6)
    np.testing.assert_allclose(flow_equilibrium(net, "atomic", time_expanded=True).shares(), [0, 5 / 9, 4 / 9], atol=1e-6)
    with pytest.raises(ValueError):
        flow_equilibrium(net, "other")
