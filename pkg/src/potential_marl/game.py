"""Stochastic game container, rollouts, replay buffer and structural checks.

All environment oracles are batch-first: states are (B, state_dim) arrays,
joint actions are (B, total_action_dim) arrays with agent ``i`` occupying
``game.agent_slice(i)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .approx import GaussianPolicy

Array = np.ndarray


@dataclass
class GameSpec:
    name: str
    n_agents: int
    state_dim: int
    action_dims: list[int]
    horizon: int
    discount: float
    reward_oracle: Callable[[Array, Array], Array]
    transition_sampler: Callable[[Array, Array, np.random.Generator], Array]
    initial_state_sampler: Callable[[np.random.Generator], Array]
    action_low: Array
    action_high: Array
    state_low: Array
    state_high: Array
    # (s, a) -> (dR/da of shape (B, N, A), dR/ds of shape (B, N, S))
    reward_grad_oracle: Optional[Callable[[Array, Array], tuple[Array, Array]]] = None
    analytic_potential: Optional[Callable[[Array, Array], Array]] = None
    # (s, a) -> (dphi/da (B, A), dphi/ds (B, S))
    potential_grad: Optional[Callable[[Array, Array], tuple[Array, Array]]] = None
    done_fn: Optional[Callable[[Array], Array]] = None
    probe_sampler: Optional[Callable[[np.random.Generator, int], tuple[Array, Array]]] = None
    state_sampler: Optional[Callable[[np.random.Generator, int], Array]] = None
    analytic_ne: Optional[Array] = None
    best_response: Optional[Callable[[int, Array], Array]] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.action_dims) != self.n_agents:
            raise ValueError("need one action dimension per agent")
        if any(d < 1 for d in self.action_dims):
            raise ValueError("action dimensions must be >= 1")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        for name in ("action_low", "action_high", "state_low", "state_high"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.offsets = np.concatenate([[0], np.cumsum(self.action_dims)]).astype(int)

    @property
    def total_action_dim(self) -> int:
        return int(self.offsets[-1])

    def agent_slice(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def agent_low(self, i: int) -> Array:
        return self.action_low[self.agent_slice(i)]

    def agent_high(self, i: int) -> Array:
        return self.action_high[self.agent_slice(i)]

    def rewards(self, s: Array, a: Array) -> Array:
        s, a = np.asarray(s, dtype=np.float64), np.asarray(a, dtype=np.float64)
        if s.ndim == 1:
            return self.reward_oracle(s[None], a[None])[0]
        return self.reward_oracle(s, a)

    def potential(self, s: Array, a: Array) -> Array:
        if self.analytic_potential is None:
            raise ValueError(f"game {self.name!r} has no analytic potential")
        s, a = np.asarray(s, dtype=np.float64), np.asarray(a, dtype=np.float64)
        if s.ndim == 1:
            return self.analytic_potential(s[None], a[None])[0]
        return self.analytic_potential(s, a)

    def step(self, s: Array, a: Array, rng: np.random.Generator) -> Array:
        return self.transition_sampler(np.asarray(s, dtype=np.float64)[None], np.asarray(a, dtype=np.float64)[None], rng)[0]

    def is_done(self, s: Array) -> bool:
        if self.done_fn is None:
            return False
        return bool(self.done_fn(np.asarray(s)[None])[0])

    def sample_states(self, rng: np.random.Generator, n: int) -> Array:
        if self.state_sampler is not None:
            return self.state_sampler(rng, n)
        return rng.uniform(self.state_low, self.state_high, size=(n, self.state_dim))

    def sample_actions(self, rng: np.random.Generator, n: int) -> Array:
        return rng.uniform(self.action_low, self.action_high, size=(n, self.total_action_dim))

    def sample_probes(self, rng: np.random.Generator, n: int) -> tuple[Array, Array]:
        if self.probe_sampler is not None:
            return self.probe_sampler(rng, n)
        return self.sample_states(rng, n), self.sample_actions(rng, n)


@dataclass
class TransitionSample:
    s: Array
    a: Array
    s2: Array
    r: Array
    done: bool

    def to_json(self) -> dict:
        return {"s": self.s.tolist(), "a": self.a.tolist(), "s2": self.s2.tolist(), "r": self.r.tolist(), "done": bool(self.done)}

    @classmethod
    def from_json(cls, d: dict) -> "TransitionSample":
        return cls(np.asarray(d["s"], float), np.asarray(d["a"], float), np.asarray(d["s2"], float), np.asarray(d["r"], float), bool(d["done"]))


class ReplayBuffer:
    """Fixed-capacity FIFO ring over preallocated arrays."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int, n_agents: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.s2 = np.zeros((capacity, state_dim))
        self.r = np.zeros((capacity, n_agents))
        self.done = np.zeros(capacity, dtype=bool)
        self.inserted = 0

    @classmethod
    def for_game(cls, game: GameSpec, capacity: int) -> "ReplayBuffer":
        return cls(capacity, game.state_dim, game.total_action_dim, game.n_agents)

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def add(self, t: TransitionSample) -> None:
        k = self.inserted % self.capacity
        self.s[k], self.a[k], self.s2[k], self.r[k], self.done[k] = t.s, t.a, t.s2, t.r, t.done
        self.inserted += 1

    def extend(self, samples) -> None:
        for t in samples:
            self.add(t)

    def get(self, k: int) -> TransitionSample:
        return TransitionSample(self.s[k].copy(), self.a[k].copy(), self.s2[k].copy(), self.r[k].copy(), bool(self.done[k]))

    def sample_indices(self, batch: int, rng: np.random.Generator) -> Array:
        if len(self) == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, len(self), size=batch)

    def arrays(self, idx: Array | None = None):
        """(s, a, s2, r, done) for ``idx`` or for every stored transition."""
        if idx is None:
            idx = np.arange(len(self))
        return self.s[idx], self.a[idx], self.s2[idx], self.r[idx], self.done[idx]


def buffer_sample(buffer: ReplayBuffer, batch: int, rng: np.random.Generator) -> list[TransitionSample]:
    if batch == 0:
        return []
    return [buffer.get(int(k)) for k in buffer.sample_indices(batch, rng)]


def joint_action(policies: list[GaussianPolicy], s: Array, rng: np.random.Generator | None, deterministic: bool = False) -> Array:
    parts = []
    for p in policies:
        parts.append(p.mean_action(s) if deterministic or rng is None else p.sample(s, rng))
    return np.concatenate(parts, axis=-1)


def _check_policies(game: GameSpec, policies: list[GaussianPolicy]) -> None:
    if len(policies) != game.n_agents:
        raise ValueError(f"{game.name}: expected {game.n_agents} policies, got {len(policies)}")
    for i, p in enumerate(policies):
        if p.action_dim != game.action_dims[i]:
            raise ValueError(f"policy {i} has action dim {p.action_dim}, game expects {game.action_dims[i]}")


def rollout(
    game: GameSpec,
    policies: list[GaussianPolicy],
    episodes: int,
    rng: np.random.Generator,
    deterministic: bool = False,
) -> list[TransitionSample]:
    """Play ``episodes`` episodes; samples are returned in time order."""
    _check_policies(game, policies)
    out: list[TransitionSample] = []
    for _ in range(episodes):
        s = np.asarray(game.initial_state_sampler(rng), dtype=np.float64)
        for t in range(game.horizon):
            a = joint_action(policies, s, rng, deterministic)
            r = game.rewards(s, a)
            s2 = game.step(s, a, rng)
            done = t == game.horizon - 1 or game.is_done(s2)
            out.append(TransitionSample(s, a, s2, r, done))
            s = s2
            if done:
                break
    return out


def episode_returns(samples: list[TransitionSample], n_agents: int) -> Array:
    """Undiscounted per-agent return of each episode, shape (episodes, N)."""
    rets, cur = [], np.zeros(n_agents)
    for t in samples:
        cur = cur + t.r
        if t.done:
            rets.append(cur)
            cur = np.zeros(n_agents)
    if not rets:
        rets.append(cur)
    return np.asarray(rets)


def write_trajectories(path: str | Path, samples: list[TransitionSample]) -> None:
    with open(path, "w") as fh:
        for t in samples:
            fh.write(json.dumps(t.to_json()) + "\n")


def read_trajectories(path: str | Path) -> list[TransitionSample]:
    with open(path) as fh:
        return [TransitionSample.from_json(json.loads(line)) for line in fh if line.strip()]


# structural checks


@dataclass
class CheckReport:
    max_violation: float
    mean_violation: float
    passed: bool
    probes: int
    tol: float
    worst: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "max_violation": self.max_violation,
            "mean_violation": self.mean_violation,
            "pass": self.passed,
            "probes": self.probes,
            "tol": self.tol,
            "worst": self.worst,
        }


def _phi_batch(game: GameSpec, phi) -> Callable[[Array, Array], Array]:
    if phi is None:
        if game.analytic_potential is None:
            raise ValueError(f"game {game.name!r} has no analytic potential; pass phi")
        return game.analytic_potential
    return phi


def _report(viol: Array, tol: float, info: dict) -> CheckReport:
    k = int(np.argmax(viol))
    worst = {key: (val[k].tolist() if isinstance(val, np.ndarray) else val) for key, val in info.items()}
    return CheckReport(float(viol.max()), float(viol.mean()), bool(viol.max() <= tol), int(viol.size), tol, worst)


def check_potentiality(game: GameSpec, phi, probes: int, tol: float, rng: np.random.Generator) -> CheckReport:
    """Unilateral-deviation test of R_i differences against phi differences.

    ``phi`` is a batch callable (s, a) -> (B,), or None for the game's analytic
    potential.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    phi = _phi_batch(game, phi)
    s, a = game.sample_probes(rng, probes)
    _, a_alt = game.sample_probes(rng, probes)
    agents = rng.integers(0, game.n_agents, size=probes)
    a_dev = a.copy()
    for i in range(game.n_agents):
        sl = game.agent_slice(i)
        rows = agents == i
        a_dev[rows, sl] = a_alt[rows, sl]
    r0 = game.reward_oracle(s, a)[np.arange(probes), agents]
    r1 = game.reward_oracle(s, a_dev)[np.arange(probes), agents]
    viol = np.abs((r1 - r0) - (phi(s, a_dev) - phi(s, a)))
    return _report(viol, tol, {"s": s, "a": a, "a_dev": a_dev, "agent": agents})


def check_state_transitivity(game: GameSpec, phi, probes: int, tol: float, rng: np.random.Generator) -> CheckReport:
    if probes < 1:
        raise ValueError("probes must be >= 1")
    phi = _phi_batch(game, phi)
    s, a = game.sample_probes(rng, probes)
    s2, _ = game.sample_probes(rng, probes)
    dr = game.reward_oracle(s, a) - game.reward_oracle(s2, a)
    dphi = (phi(s, a) - phi(s2, a))[:, None]
    per_agent = np.abs(dr - dphi)
    viol = per_agent.max(axis=1)
    return _report(viol, tol, {"s": s, "s_alt": s2, "a": a})
