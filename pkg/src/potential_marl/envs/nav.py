"""Coordination navigation with smooth point dynamics in the plane."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..game import GameSpec


@dataclass
class NavParams:
    n_agents: int = 3
    target: tuple[float, float] = (0.0, 0.0)
    alpha: float = 1.0
    beta: float = 0.1
    eps: float = 0.01
    K: tuple[float, ...] | float = 0.0
    rho: tuple[float, float] = (0.0, 0.0)
    M: np.ndarray = field(default_factory=lambda: 0.1 * np.eye(2))
    dt: float = 0.1
    horizon: int = 25
    box: float = 2.0
    discount: float = 0.99

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=np.float64)
        if self.M.shape != (2, 2) or not np.allclose(self.M, self.M.T):
            raise ValueError("M must be a symmetric 2x2 matrix")
        if np.min(np.linalg.eigvalsh(self.M)) < -1e-12:
            raise ValueError("M must be positive semi-definite")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        self.K = tuple(np.broadcast_to(np.asarray(self.K, dtype=np.float64), (self.n_agents,)).tolist())


def nav_game(p: NavParams | None = None) -> GameSpec:
    p = p or NavParams()
    N = p.n_agents
    tgt = np.asarray(p.target, dtype=np.float64)
    rho = np.asarray(p.rho, dtype=np.float64)
    K = np.asarray(p.K)
    iu = np.triu_indices(N, 1)

    def _parts(s, a):
        x = s.reshape(-1, N, 2)
        act = a.reshape(-1, N, 2)
        to_tgt = ((x - tgt) ** 2).sum(axis=2)  # (B, N)
        diff = x[:, :, None, :] - x[:, None, :, :]
        rep = (np.sum(diff**2, axis=3) + p.eps) ** -0.5  # (B, N, N)
        rep[:, np.arange(N), np.arange(N)] = 0.0
        da = act - rho
        pen = np.einsum("bni,ij,bnj->bn", da, p.M, da)
        return x, act, to_tgt, diff, rep, da, pen

    def rewards(s, a):
        _, _, to_tgt, _, rep, _, pen = _parts(s, a)
        return K - p.alpha * to_tgt - p.beta * rep.sum(axis=2) - pen

    def potential(s, a):
        _, _, to_tgt, _, rep, _, pen = _parts(s, a)
        return -p.alpha * to_tgt.sum(axis=1) - p.beta * rep[:, iu[0], iu[1]].sum(axis=1) - pen.sum(axis=1)

    def _rep_grad(diff, rep):
        # d/dx_k of (|x_k - x_j|^2 + eps)^-1/2 = -(...)^-3/2 (x_k - x_j)
        return -(rep**3)[..., None] * diff  # (B, k, j, 2)

    def reward_grads(s, a):
        x, act, _, diff, rep, da, _ = _parts(s, a)
        B = s.shape[0]
        g_rep = _rep_grad(diff, rep)
        # d rep[i, j] / d x_j = -g_rep[i, j], and the reward carries -beta * rep
        ds = p.beta * g_rep
        ds[:, np.arange(N), np.arange(N)] = -2 * p.alpha * (x - tgt) - p.beta * g_rep.sum(axis=2)
        dact = np.zeros((B, N, N, 2))
        dact[:, np.arange(N), np.arange(N)] = -2 * np.einsum("ij,bnj->bni", p.M, da)
        return dact.reshape(B, N, 2 * N), ds.reshape(B, N, 2 * N)

    def potential_grad(s, a):
        x, act, _, diff, rep, da, _ = _parts(s, a)
        g_rep = _rep_grad(diff, rep)
        ds = -2 * p.alpha * (x - tgt) - p.beta * g_rep.sum(axis=2)
        dact = -2 * np.einsum("ij,bnj->bni", p.M, da)
        return dact.reshape(s.shape[0], 2 * N), ds.reshape(s.shape[0], 2 * N)

    def transition(s, a, rng):
        return s + p.dt * a

    return GameSpec(
        name="nav",
        n_agents=N,
        state_dim=2 * N,
        action_dims=[2] * N,
        horizon=p.horizon,
        discount=p.discount,
        reward_oracle=rewards,
        transition_sampler=transition,
        initial_state_sampler=lambda rng: rng.uniform(-p.box, p.box, size=2 * N),
        action_low=-np.ones(2 * N),
        action_high=np.ones(2 * N),
        state_low=np.full(2 * N, -p.box),
        state_high=np.full(2 * N, p.box),
        reward_grad_oracle=reward_grads,
        analytic_potential=potential,
        potential_grad=potential_grad,
        meta={"params": p},
    )
