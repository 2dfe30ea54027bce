"""Discretized dual MDPs and exact tabular solvers used as desk-scale oracles."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .game import GameSpec


@dataclass
class TabularMdp:
    states: np.ndarray  # (S, state_dim); a terminal row is included when ``terminal`` is set
    joint_actions: np.ndarray  # (A, total_action_dim)
    reward: np.ndarray  # (S, A) potential table
    transitions: np.ndarray  # (S, A, S)
    gamma: float
    agent_rewards: np.ndarray | None = None  # (N, S, A)
    action_index: np.ndarray | None = None  # (A, N) per-agent grid index of each joint action
    grid_sizes: tuple[int, ...] = ()
    terminal: int | None = None

    def __post_init__(self):
        rows = self.transitions.sum(axis=2)
        if not np.allclose(rows, 1.0, atol=1e-9):
            raise ValueError("transition rows must sum to 1")

    @property
    def n_states(self) -> int:
        return self.reward.shape[0]

    @property
    def n_actions(self) -> int:
        return self.reward.shape[1]

    def joint_index(self, per_agent: tuple[int, ...]) -> int:
        return int(np.ravel_multi_index(per_agent, self.grid_sizes))


def _joint_grid(action_grids: list[np.ndarray]):
    grids = [np.atleast_2d(np.asarray(g, dtype=np.float64).T).T for g in action_grids]  # each (K_i, d_i)
    sizes = tuple(g.shape[0] for g in grids)
    idx = np.array(list(itertools.product(*[range(k) for k in sizes])), dtype=int)
    joint = np.concatenate([grids[i][idx[:, i]] for i in range(len(grids))], axis=1)
    return joint, idx, sizes


def discretize(
    game: GameSpec,
    state_grid,
    action_grids: list,
    mc_samples: int,
    rng: np.random.Generator,
    potential=None,
) -> TabularMdp:
    """Tabulate rewards and Monte-Carlo transition frequencies on a grid.

    Next states snap to the nearest grid state. Transitions that end the
    episode (``done_fn`` or a horizon-1 game) go to an absorbing zero-reward
    terminal state appended after the grid.
    """
    states = np.atleast_2d(np.asarray(state_grid, dtype=np.float64))
    if states.shape[1] != game.state_dim and states.shape[0] == game.state_dim:
        states = states.T
    if states.size == 0 or any(len(np.atleast_1d(g)) == 0 for g in action_grids):
        raise ValueError("grids must be non-empty")
    if len(action_grids) != game.n_agents:
        raise ValueError("need one action grid per agent")
    joint, idx, sizes = _joint_grid(action_grids)
    S, A = states.shape[0], joint.shape[0]
    phi = potential if potential is not None else game.analytic_potential
    if phi is None:
        raise ValueError("discretize needs a potential (game has no analytic one)")

    ss = np.repeat(states, A, axis=0)
    aa = np.tile(joint, (S, 1))
    reward = np.asarray(phi(ss, aa), dtype=np.float64).reshape(S, A)
    agent_r = game.reward_oracle(ss, aa).reshape(S, A, game.n_agents).transpose(2, 0, 1)

    terminal_possible = game.horizon == 1 or game.done_fn is not None
    n_total = S + (1 if terminal_possible else 0)
    P = np.zeros((n_total, A, n_total))
    for _ in range(max(1, mc_samples)):
        nxt = game.transition_sampler(ss, aa, rng)
        d2 = ((nxt[:, None, :] - states[None, :, :]) ** 2).sum(axis=2)
        snap = np.argmin(d2, axis=1)
        if terminal_possible:
            done = np.ones(len(ss), dtype=bool) if game.horizon == 1 else np.asarray(game.done_fn(nxt), dtype=bool)
            snap = np.where(done, S, snap)
        np.add.at(P, (np.repeat(np.arange(S), A), np.tile(np.arange(A), S), snap), 1.0)
    if terminal_possible:
        P[S, :, S] = 1.0
        reward = np.vstack([reward, np.zeros((1, A))])
        agent_r = np.concatenate([agent_r, np.zeros((game.n_agents, 1, A))], axis=1)
        states = np.vstack([states, np.full((1, game.state_dim), np.nan)])
    P /= P.sum(axis=2, keepdims=True)
    return TabularMdp(states, joint, reward, P, game.discount, agent_r, idx, sizes, S if terminal_possible else None)


@dataclass
class ViResult:
    V: np.ndarray
    policy: np.ndarray
    Q: np.ndarray
    deltas: list[float] = field(default_factory=list)


def value_iteration(mdp: TabularMdp, tol: float = 1e-10, V0: np.ndarray | None = None, max_iter: int = 100_000, reward: np.ndarray | None = None) -> ViResult:
    """Iterate V <- max_a [r(s,a) + gamma P V] to sup-norm change < tol.

    Greedy ties go to the lowest joint-action index.
    """
    if not mdp.gamma < 1.0:
        raise ValueError("value iteration needs gamma < 1")
    r = mdp.reward if reward is None else reward
    V = np.zeros(mdp.n_states) if V0 is None else np.asarray(V0, dtype=np.float64).copy()
    deltas = []
    for _ in range(max_iter):
        Q = r + mdp.gamma * mdp.transitions @ V
        V_new = Q.max(axis=1)
        delta = float(np.max(np.abs(V_new - V)))
        deltas.append(delta)
        V = V_new
        if delta < tol:
            break
    Q = r + mdp.gamma * mdp.transitions @ V
    return ViResult(V, np.argmax(Q, axis=1), Q, deltas)


def policy_evaluation(mdp: TabularMdp, policy: np.ndarray, reward: np.ndarray) -> np.ndarray:
    """Exact value of a deterministic joint policy under the reward table ``reward`` (S, A)."""
    S = mdp.n_states
    rows = np.arange(S)
    P_pi = mdp.transitions[rows, policy]
    r_pi = reward[rows, policy]
    return np.linalg.solve(np.eye(S) - mdp.gamma * P_pi, r_pi)


def mpe_certificate(mdp: TabularMdp, policy: np.ndarray, tol: float = 1e-9):
    """Largest gain any single agent gets from a tabular unilateral deviation.

    For each agent the others are frozen at ``policy`` and the agent's own
    best-response MDP is solved exactly. Returns (gains (N, S), ok).
    """
    if mdp.agent_rewards is None or mdp.action_index is None:
        raise ValueError("certificate needs per-agent rewards and the joint action index")
    N = mdp.agent_rewards.shape[0]
    S = mdp.n_states
    gains = np.zeros((N, S))
    base_idx = mdp.action_index[policy]  # (S, N)
    for i in range(N):
        v_cur = policy_evaluation(mdp, policy, mdp.agent_rewards[i])
        # joint action index for each (state, own action) with others held fixed
        options = np.zeros((S, mdp.grid_sizes[i]), dtype=int)
        for s in range(S):
            for k in range(mdp.grid_sizes[i]):
                per = base_idx[s].copy()
                per[i] = k
                options[s, k] = mdp.joint_index(tuple(per))
        V = np.zeros(S)
        for _ in range(100_000):
            Q = mdp.agent_rewards[i][np.arange(S)[:, None], options] + mdp.gamma * np.einsum("skt,t->sk", mdp.transitions[np.arange(S)[:, None], options], V)
            V_new = Q.max(axis=1)
            if np.max(np.abs(V_new - V)) < 1e-13:
                V = V_new
                break
            V = V_new
        gains[i] = V - v_cur
    return gains, bool(np.all(gains <= tol))


def random_potential_mdp(rng: np.random.Generator, n_states: int = 6, grid: int = 3, n_agents: int = 2, gamma: float = 0.9) -> TabularMdp:
    """Random team-reward tabular game: every agent is paid the potential table."""
    sizes = (grid,) * n_agents
    A = grid**n_agents
    idx = np.array(list(itertools.product(*[range(grid) for _ in range(n_agents)])), dtype=int)
    joint = idx.astype(np.float64) / max(grid - 1, 1)
    reward = rng.uniform(-1.0, 1.0, size=(n_states, A))
    P = rng.dirichlet(np.ones(n_states), size=(n_states, A))
    states = np.arange(n_states, dtype=np.float64)[:, None]
    return TabularMdp(states, joint, reward, P, gamma, np.repeat(reward[None], n_agents, axis=0), idx, sizes)
