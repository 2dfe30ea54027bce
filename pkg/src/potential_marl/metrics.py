"""Evaluation: returns, social welfare, NE gap, exploitability and the CSV row."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .game import GameSpec, TransitionSample, episode_returns, rollout


def _policies(actors):
    return list(actors.actors) if hasattr(actors, "actors") else list(actors)


def evaluate_returns(game: GameSpec, actors, episodes: int, seed: int = 0) -> np.ndarray:
    """Undiscounted per-agent returns of deterministic play, shape (episodes, N)."""
    samples = rollout(game, _policies(actors), episodes, np.random.default_rng(seed), deterministic=True)
    return episode_returns(samples, game.n_agents)


def social_welfare_of(returns: np.ndarray) -> float:
    return float(np.mean(np.sum(returns, axis=1)))


def social_welfare(trajectories: list[TransitionSample]) -> float:
    """Mean over episodes of sum_t sum_i r_i,t."""
    if not trajectories:
        raise ValueError("social welfare needs at least one transition")
    return social_welfare_of(episode_returns(trajectories, len(trajectories[0].r)))


def ne_gap(game: GameSpec, actors) -> float:
    """Largest sup-norm distance of a deterministic action from the analytic NE."""
    if game.analytic_ne is None:
        return float("nan")
    s0 = np.asarray(game.initial_state_sampler(np.random.default_rng(0)), dtype=np.float64)
    a = np.concatenate([p.mean_action(s0[None])[0] for p in _policies(actors)])
    ne = np.asarray(game.analytic_ne, dtype=np.float64)
    return float(max(np.max(np.abs(a[game.agent_slice(i)] - ne[game.agent_slice(i)])) for i in range(game.n_agents)))


@dataclass
class ExploitabilityResult:
    delta: float
    gains: list[float]
    stderrs: list[float]
    method: str


def analytic_exploitability(game: GameSpec, actors) -> ExploitabilityResult:
    """Closed-form best responses for one-shot games with a fixed initial state."""
    if game.best_response is None or game.horizon != 1:
        raise ValueError("analytic exploitability needs a one-shot game with a best-response oracle")
    s0 = np.asarray(game.initial_state_sampler(np.random.default_rng(0)), dtype=np.float64)
    a = np.concatenate([p.mean_action(s0[None])[0] for p in _policies(actors)])
    base = game.rewards(s0, a)
    gains = []
    for i in range(game.n_agents):
        dev = a.copy()
        dev[game.agent_slice(i)] = game.best_response(i, a)
        gains.append(float(game.rewards(s0, dev)[i] - base[i]))
    return ExploitabilityResult(float(np.mean(gains)), gains, [0.0] * len(gains), "analytic")


def exploitability(game: GameSpec, actors, br_cfg=None, rng: np.random.Generator | None = None, method: str = "auto", eval_episodes: int = 100) -> ExploitabilityResult:
    """Mean best-response gain over agents.

    ``method="auto"`` uses the closed-form best response when the game offers
    one, otherwise trains a best response per agent.
    """
    if method == "analytic" or (method == "auto" and game.best_response is not None and game.horizon == 1):
        return analytic_exploitability(game, actors)
    from .learners import ActorSet, TrainConfig, train_best_response

    if br_cfg is None:
        br_cfg = TrainConfig(steps=5000)
    if br_cfg.steps <= 0:
        raise ValueError("best-response budget must be positive")
    actor_set = actors if isinstance(actors, ActorSet) else ActorSet(list(actors))
    rng = rng if rng is not None else np.random.default_rng(0)
    streams = rng.spawn(game.n_agents)
    results = [train_best_response(game, actor_set, i, br_cfg, streams[i], eval_episodes) for i in range(game.n_agents)]
    gains = [r.gain for r in results]
    return ExploitabilityResult(float(np.mean(gains)), gains, [r.stderr for r in results], "learned")


# CSV rows


@dataclass
class MetricsRow:
    run_id: str
    seed: int
    env: str
    algo: str
    iteration: int
    episodes: int
    social_welfare: float
    exploitability: float
    ne_gap: float
    potential_residual: float
    wall_ms: int

    NAN_OK = ("exploitability", "ne_gap", "potential_residual")

    def __post_init__(self):
        for f in ("social_welfare", "exploitability", "ne_gap", "potential_residual"):
            v = float(getattr(self, f))
            if not math.isfinite(v) and not (math.isnan(v) and f in self.NAN_OK):
                raise ValueError(f"metrics column {f} must be finite, got {v}")

    @staticmethod
    def header() -> list[str]:
        return [f.name for f in fields(MetricsRow)]

    def values(self) -> list:
        out = []
        for k, v in asdict(self).items():
            out.append(repr(float(v)) if isinstance(v, float) else v)
        return out

    def to_csv_line(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(self.values())
        return buf.getvalue()


CSV_HEADER = ",".join(MetricsRow.header())
