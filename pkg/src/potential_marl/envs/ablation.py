"""Reward perturbations that keep or break the potential structure of a base game."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Literal, Optional

import numpy as np

from ..game import GameSpec

Mode = Literal["noncoop_potential", "non_potential"]


def _lead(game: GameSpec, a: np.ndarray) -> np.ndarray:
    """First action coordinate of every agent, (B, N)."""
    return a[:, game.offsets[:-1]]


def dummy_terms(game: GameSpec, s, a):
    """L_i = -mean_{j != i} a_j^2 on the lead coordinate; own action never enters."""
    x = _lead(game, a)
    N = game.n_agents
    if N == 1:
        return np.zeros_like(x), np.zeros((a.shape[0], 1, a.shape[1]))
    sq = x * x
    vals = -(sq.sum(axis=1, keepdims=True) - sq) / (N - 1)
    grads = np.zeros((a.shape[0], N, a.shape[1]))
    for i in range(N):
        for j in range(N):
            if j != i:
                grads[:, i, game.offsets[j]] = -2.0 * x[:, j] / (N - 1)
    return vals, grads


def cyclic_terms(game: GameSpec, s, a):
    """J_i = -(a_i - sin a_{i+1})^2 on lead coordinates, indices mod N.

    The cross derivatives 2 cos(a_{i+1}) and 2 cos(a_i) disagree, so no
    potential can absorb this term.
    """
    x = _lead(game, a)
    N = game.n_agents
    nxt = np.roll(x, -1, axis=1)
    u = x - np.sin(nxt)
    vals = -(u**2)
    grads = np.zeros((a.shape[0], N, a.shape[1]))
    for i in range(N):
        k = (i + 1) % N
        grads[:, i, game.offsets[i]] += -2.0 * u[:, i]
        grads[:, i, game.offsets[k]] += 2.0 * u[:, i] * np.cos(nxt[:, i])
    return vals, grads


@dataclass
class AblationConfig:
    base: GameSpec
    mode: Mode = "non_potential"
    c: float = 0.0
    # (s, a) -> (values (B, N), action grads (B, N, A)); defaults depend on mode
    term: Optional[Callable] = None

    def __post_init__(self):
        if self.c < 0:
            raise ValueError("ablation coefficient c must be >= 0")
        if self.mode not in ("noncoop_potential", "non_potential"):
            raise ValueError(f"unknown ablation mode {self.mode!r}")


def ablate(cfg: AblationConfig) -> GameSpec:
    base = cfg.base
    if cfg.c == 0.0:
        return replace(base, meta={**base.meta, "ablation": (cfg.mode, 0.0)})
    term = cfg.term or (dummy_terms if cfg.mode == "noncoop_potential" else cyclic_terms)
    c = float(cfg.c)

    def rewards(s, a):
        return base.reward_oracle(s, a) + c * term(base, s, a)[0]

    grad_oracle = None
    if base.reward_grad_oracle is not None:

        def grad_oracle(s, a):
            da, ds = base.reward_grad_oracle(s, a)
            return da + c * term(base, s, a)[1], ds

    keep_structure = cfg.mode == "noncoop_potential"
    return replace(
        base,
        name=f"{base.name}-{cfg.mode}-c{c:g}",
        reward_oracle=rewards,
        reward_grad_oracle=grad_oracle,
        # adding c*J moves every agent's best response, so the base equilibrium no longer applies
        analytic_ne=base.analytic_ne if keep_structure else None,
        best_response=base.best_response if keep_structure else None,
        analytic_potential=base.analytic_potential,
        potential_grad=base.potential_grad,
        meta={**base.meta, "ablation": (cfg.mode, c)},
    )


def team_game(game: GameSpec) -> GameSpec:
    """Every agent is paid the base game's potential."""
    if game.analytic_potential is None:
        raise ValueError(f"game {game.name!r} has no analytic potential to share")
    phi = game.analytic_potential
    N = game.n_agents

    def rewards(s, a):
        return np.repeat(phi(s, a)[:, None], N, axis=1)

    grad_oracle = None
    if game.potential_grad is not None:

        def grad_oracle(s, a):
            da, ds = game.potential_grad(s, a)
            return np.repeat(da[:, None], N, axis=1), np.repeat(ds[:, None], N, axis=1)

    return replace(
        game,
        name=f"{game.name}-team",
        reward_oracle=rewards,
        reward_grad_oracle=grad_oracle,
        analytic_ne=None,
        best_response=None,
        meta={**game.meta, "team": True},
    )
