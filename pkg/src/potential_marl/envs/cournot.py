"""N-firm Cournot competition as a one-shot stochastic game."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..game import GameSpec


@dataclass
class CournotParams:
    n_agents: int = 2
    alpha: float = 2.0
    beta: float = 1.0
    gamma_cost: float = 1.0
    caps: tuple[float, ...] | float = 1.0
    discount: float = 0.99

    def __post_init__(self):
        caps = np.broadcast_to(np.asarray(self.caps, dtype=np.float64), (self.n_agents,))
        if np.any(caps <= 0):
            raise ValueError("action caps must be positive")
        if self.beta == 0:
            raise ValueError("beta must be non-zero")
        self.caps = tuple(float(c) for c in caps)

    def symmetric_ne(self) -> float:
        return (self.alpha - self.gamma_cost) / (self.beta * (self.n_agents + 1))


def cournot_rewards(p: CournotParams, a: np.ndarray) -> np.ndarray:
    total = a.sum(axis=1, keepdims=True)
    return a * (p.alpha - p.beta * total) - p.gamma_cost * a


def cournot_potential(p: CournotParams, a: np.ndarray) -> np.ndarray:
    total = a.sum(axis=1)
    sq = (a * a).sum(axis=1)
    cross = 0.5 * (total * total - sq)  # sum_{i<j} a_i a_j
    return (p.alpha - p.gamma_cost) * total - p.beta * sq - p.beta * cross


def cournot_best_response(p: CournotParams, i: int, a: np.ndarray) -> np.ndarray:
    others = a.sum() - a[i]
    br = (p.alpha - p.gamma_cost - p.beta * others) / (2.0 * p.beta)
    return np.array([np.clip(br, -p.caps[i], p.caps[i])])


def cournot_game(p: CournotParams | None = None) -> GameSpec:
    p = p or CournotParams()
    N = p.n_agents
    caps = np.asarray(p.caps)

    def rewards(s, a):
        return cournot_rewards(p, a)

    def reward_grads(s, a):
        B = a.shape[0]
        total = a.sum(axis=1)
        da = np.zeros((B, N, N))
        # only own action enters R_i with a non-trivial own derivative; others enter via -beta a_i
        diag = p.alpha - p.beta * total[:, None] - p.beta * a - p.gamma_cost
        da[:, np.arange(N), np.arange(N)] = diag
        off = -p.beta * a[:, :, None] * np.ones((1, 1, N))
        mask = ~np.eye(N, dtype=bool)
        da[:, mask] = off[:, mask]
        return da, np.zeros((B, N, 1))

    def potential(s, a):
        return cournot_potential(p, a)

    def potential_grad(s, a):
        total = a.sum(axis=1, keepdims=True)
        return p.alpha - p.gamma_cost - p.beta * a - p.beta * total, np.zeros((a.shape[0], 1))

    def transition(s, a, rng):
        return np.zeros((a.shape[0], 1))

    ne = p.symmetric_ne()
    analytic_ne = np.full(N, ne) if np.all(np.abs(ne) <= caps) else None

    return GameSpec(
        name=f"cournot{N}",
        n_agents=N,
        state_dim=1,
        action_dims=[1] * N,
        horizon=1,
        discount=p.discount,
        reward_oracle=rewards,
        transition_sampler=transition,
        initial_state_sampler=lambda rng: np.zeros(1),
        action_low=-caps,
        action_high=caps,
        state_low=np.zeros(1),
        state_high=np.zeros(1),
        reward_grad_oracle=reward_grads,
        analytic_potential=potential,
        potential_grad=potential_grad,
        analytic_ne=analytic_ne,
        best_response=lambda i, a: cournot_best_response(p, i, np.asarray(a, dtype=np.float64)),
        meta={"params": p},
    )


def best_response_dynamics(p: CournotParams, a0=None, iters: int = 500, tol: float = 1e-13) -> np.ndarray:
    """Gauss-Seidel best-response iteration; converges for the linear Cournot game."""
    a = np.zeros(p.n_agents) if a0 is None else np.asarray(a0, dtype=np.float64).copy()
    for _ in range(iters):
        prev = a.copy()
        for i in range(p.n_agents):
            a[i] = cournot_best_response(p, i, a)[0]
        if np.max(np.abs(a - prev)) < tol:
            break
    return a
