"""Solvers for the shared-potential team problem and the baselines around it.

SPot-AC trains one joint critic on the (estimated) potential and gives every
agent its own deterministic-gradient actor. The independent baseline and the
best-response trainer reuse the same loop with per-agent critics on each
agent's own reward.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Literal, Optional

import numpy as np

from .approx import DenseNet, GaussianPolicy, NumericError, OptimizerState, optimizer_step
from .game import GameSpec, ReplayBuffer, TransitionSample
from .metrics import evaluate_returns, ne_gap, social_welfare_of
from .potential import (
    AnalyticPotential,
    PotentialModel,
    ResidualConfig,
    estimate_potential,
    gradient_mismatch,
    reward_grad_source,
    validation_points,
)
from .tabular import TabularMdp

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_actor: float = 1e-4
    lr_critic: float = 1e-3
    batch: int = 256
    buffer: int = 4096
    gamma: float = 0.99
    clip_norm: Optional[float] = 1.0
    steps: int = 20_000
    steps_per_iter: int = 1
    updates_per_iter: int = 1
    warmup: int = 256
    phi_refresh: int = 10
    refresh_iterations: int = 50
    tau: float = 0.01
    actor_tau: float = 0.01
    sigma_start: float = 0.1
    sigma_end: float = 0.01
    hidden: tuple[int, ...] = (64, 64, 64)
    actor_hidden: tuple[int, ...] = (64, 64, 64)
    max_proxy: Literal["actors", "sampling"] = "actors"
    proxy_samples: int = 64
    reeval_others: bool = False
    use_analytic_potential: bool = False
    residual: ResidualConfig = field(default_factory=ResidualConfig)
    eval_every: int = 1000
    eval_episodes: int = 10

    def __post_init__(self):
        if self.lr_actor <= 0 or self.lr_critic <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 < self.tau <= 1.0 or not 0.0 < self.actor_tau <= 1.0:
            raise ValueError("Polyak coefficients must lie in (0, 1]")
        if self.batch < 1 or self.buffer < 1 or self.steps < 1:
            raise ValueError("batch, buffer and steps must be >= 1")
        if self.max_proxy not in ("actors", "sampling"):
            raise ValueError(f"unknown max_proxy {self.max_proxy!r}")


# critic


@dataclass
class CriticModel:
    """F(s, a) with a Polyak-averaged target copy."""

    net: DenseNet
    target: DenseNet
    tau: float = 0.01

    @classmethod
    def create(cls, input_dim: int, hidden, rng: np.random.Generator, tau: float = 0.01) -> "CriticModel":
        net = DenseNet.create([input_dim, *hidden, 1], rng)
        return cls(net, net.copy(), tau)

    def value(self, s, a) -> np.ndarray:
        return self.net.forward(np.concatenate([s, a], axis=1))[:, 0]

    def target_value(self, s, a) -> np.ndarray:
        return self.target.forward(np.concatenate([s, a], axis=1))[:, 0]

    def action_grad(self, s, a) -> np.ndarray:
        x = np.concatenate([s, a], axis=1)
        _, g = self.net.gradients(x, np.ones((x.shape[0], 1)), params=False)
        return g[:, s.shape[1] :]

    def polyak(self) -> None:
        t = self.tau
        self.target.set_params(t * self.net.get_params() + (1.0 - t) * self.target.get_params())


def spotq_target(
    phi_sa: np.ndarray,
    s2: np.ndarray,
    done: np.ndarray,
    critic: CriticModel,
    gamma: float,
    next_actions: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    low: np.ndarray | None = None,
    high: np.ndarray | None = None,
    samples: int = 64,
) -> np.ndarray:
    """Y = phi(s, a) + gamma * max_a' F_target(s', a'), or phi(s, a) on terminal samples.

    The max is taken at ``next_actions`` when given (target actors), otherwise
    over ``samples`` uniform joint actions in [low, high].
    """
    phi_sa = np.asarray(phi_sa, dtype=np.float64)
    done = np.asarray(done, dtype=bool)
    if gamma == 0.0 or np.all(done):
        return phi_sa.copy()
    if next_actions is not None:
        future = critic.target_value(s2, next_actions)
    else:
        if rng is None or low is None or high is None:
            raise ValueError("sampling max needs rng and action bounds")
        B = s2.shape[0]
        cand = rng.uniform(low, high, size=(B * samples, len(low)))
        future = critic.target_value(np.repeat(s2, samples, axis=0), cand).reshape(B, samples).max(axis=1)
    return phi_sa + gamma * np.where(done, 0.0, future)


def critic_fit(critic: CriticModel, s: np.ndarray, a: np.ndarray, targets: np.ndarray, opt: OptimizerState, polyak: bool = True) -> float:
    """One optimizer step on mean (Y - F(s, a))^2, then the target update."""
    if s.shape[0] == 0:
        raise ValueError("critic_fit needs a nonempty batch")
    x = np.concatenate([s, a], axis=1)
    y, cache = critic.net.forward_cached(x)
    err = y[:, 0] - targets
    loss = float(np.mean(err**2))
    if not np.isfinite(loss):
        raise NumericError("non-finite critic loss")
    g, _ = critic.net.backward(cache, (2.0 / len(err)) * err[:, None])
    critic.net.set_params(optimizer_step(opt, critic.net.get_params(), g))
    if polyak:
        critic.polyak()
    return loss


def actor_update(actor: GaussianPolicy, critic, s: np.ndarray, a: np.ndarray, opt: OptimizerState, sl: slice) -> float:
    """Ascent step along mean_b d/d eta F(s_b, a_b with a_b[sl] = actor(s_b)).

    ``a`` is the critic's action input; the actor's own block ``sl`` is
    replaced by its squashed mean before the critic gradient is taken.
    """
    model = actor.mean_model
    if hasattr(model, "forward_cached"):
        u, cache = model.forward_cached(s)
    else:
        u, cache = model.forward(s), None
    a_in = np.array(a, dtype=np.float64, copy=True)
    a_in[:, sl] = actor.to_action(u)
    dF = critic.action_grad(s, a_in)[:, sl]
    up = dF * actor.to_action_grad(u) / s.shape[0]
    g = model.backward(cache, up)[0] if cache is not None else model.gradients(s, up)[0]
    actor.set_params(optimizer_step(opt, actor.get_params(), -g))
    return float(np.linalg.norm(g))


# actor sets and training loop


@dataclass
class ActorSet:
    actors: list[GaussianPolicy]
    sigma_start: float = 0.1
    sigma_end: float = 0.01

    def __len__(self) -> int:
        return len(self.actors)

    def __getitem__(self, i: int) -> GaussianPolicy:
        return self.actors[i]

    def sigma_at(self, frac: float) -> float:
        return self.sigma_start + (self.sigma_end - self.sigma_start) * min(max(frac, 0.0), 1.0)

    def deterministic(self, s: np.ndarray) -> np.ndarray:
        return np.concatenate([p.mean_action(s) for p in self.actors], axis=-1)

    def copy(self) -> "ActorSet":
        return ActorSet([p.copy() for p in self.actors], self.sigma_start, self.sigma_end)

    def to_dict(self) -> dict:
        return {"actors": [p.to_dict() for p in self.actors], "sigma_start": self.sigma_start, "sigma_end": self.sigma_end}

    @classmethod
    def from_dict(cls, d: dict) -> "ActorSet":
        return cls([GaussianPolicy.from_dict(p) for p in d["actors"]], d["sigma_start"], d["sigma_end"])


def make_actors(game: GameSpec, cfg: TrainConfig, rng: np.random.Generator) -> ActorSet:
    actors = []
    for i, d in enumerate(game.action_dims):
        net = DenseNet.create([game.state_dim, *cfg.actor_hidden, d], rng, out_scale=0.1)
        actors.append(GaussianPolicy(net, cfg.sigma_start, game.agent_low(i), game.agent_high(i)))
    return ActorSet(actors, cfg.sigma_start, cfg.sigma_end)


@dataclass
class _Head:
    """A critic, the joint-action columns it sees, its payoff and the actors it drives."""

    critic: CriticModel
    cols: slice
    payoff: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    agents: list[int]
    opt: OptimizerState


@dataclass
class TrainResult:
    actors: ActorSet
    critics: list[CriticModel]
    potential: object | None
    trace: list[dict]
    steps: int
    wall_s: float


def _local(game: GameSpec, head: _Head, i: int) -> slice:
    sl = game.agent_slice(i)
    return slice(sl.start - head.cols.start, sl.stop - head.cols.start)


def _loop(
    game: GameSpec,
    cfg: TrainConfig,
    rng: np.random.Generator,
    actors: ActorSet,
    heads: list[_Head],
    trainable: list[int],
    on_refresh: Callable[[ReplayBuffer, int], None] | None = None,
    on_eval: Callable[[int, ActorSet], dict] | None = None,
) -> list[dict]:
    env_rng, pol_rng, batch_rng = rng.spawn(3)
    t0 = time.perf_counter()
    buf = ReplayBuffer.for_game(game, cfg.buffer)
    targets = [p.copy() for p in actors.actors]
    actor_opts = {i: OptimizerState("adam", cfg.lr_actor, clip_norm=cfg.clip_norm) for i in trainable}
    n_iters = math.ceil(cfg.steps / cfg.steps_per_iter)
    eval_iters = max(1, cfg.eval_every // cfg.steps_per_iter)
    warmup = max(cfg.warmup, 1)
    trace: list[dict] = []
    s = np.asarray(game.initial_state_sampler(env_rng), dtype=np.float64)
    t, steps, refreshes = 0, 0, 0
    for it in range(1, n_iters + 1):
        sigma = actors.sigma_at((it - 1) / max(n_iters - 1, 1))
        for _ in range(cfg.steps_per_iter):
            parts = []
            for i, p in enumerate(actors.actors):
                if i in trainable:
                    p.sigma = sigma
                    parts.append(p.sample(s[None], pol_rng)[0])
                else:
                    parts.append(p.mean_action(s[None])[0])
            a = np.concatenate(parts)
            r = game.rewards(s, a)
            s2 = game.step(s, a, env_rng)
            t += 1
            steps += 1
            done = t >= game.horizon or game.is_done(s2)
            buf.add(TransitionSample(s, a, s2, r, done))
            if done:
                s, t = np.asarray(game.initial_state_sampler(env_rng), dtype=np.float64), 0
            else:
                s = s2
        if len(buf) >= warmup:
            if on_refresh is not None and refreshes % max(cfg.phi_refresh, 1) == 0:
                on_refresh(buf, it)
            refreshes += 1
            try:
                _updates(game, cfg, actors, targets, heads, actor_opts, buf, batch_rng)
            except NumericError as exc:
                raise NumericError(f"iteration {it}: {exc}") from exc
        if on_eval is not None and (it % eval_iters == 0 or it == n_iters):
            row = {"iteration": it, "steps": steps, **on_eval(it, actors), "wall_s": time.perf_counter() - t0}
            trace.append(row)
            log.debug("iter %d: %s", it, row)
    for i in trainable:
        actors.actors[i].sigma = cfg.sigma_end
    return trace


def _updates(game, cfg, actors, targets, heads, actor_opts, buf, batch_rng):
    for _ in range(cfg.updates_per_iter):
        idx = buf.sample_indices(cfg.batch, batch_rng)
        S, A, S2, R, D = buf.arrays(idx)
        bootstrap = cfg.gamma > 0.0 and not np.all(D)
        next_a = np.concatenate([p.mean_action(S2) for p in targets], axis=1) if bootstrap else None
        for h in heads:
            y = h.payoff(S, A, R)
            if not bootstrap:
                Y = y
            elif cfg.max_proxy == "actors":
                Y = spotq_target(y, S2, D, h.critic, cfg.gamma, next_a[:, h.cols])
            else:
                Y = spotq_target(y, S2, D, h.critic, cfg.gamma, None, batch_rng, game.action_low[h.cols], game.action_high[h.cols], cfg.proxy_samples)
            critic_fit(h.critic, S, A[:, h.cols], Y, h.opt)
        a_in = A
        if cfg.reeval_others:
            a_in = actors.deterministic(S)
        for h in heads:
            for i in h.agents:
                actor_update(actors.actors[i], h.critic, S, a_in[:, h.cols], actor_opts[i], _local(game, h, i))
    for i in actor_opts:
        tgt, src = targets[i], actors.actors[i]
        tgt.set_params(cfg.actor_tau * src.get_params() + (1.0 - cfg.actor_tau) * tgt.get_params())


def _evaluator(game: GameSpec, cfg: TrainConfig, potential_holder: dict | None):
    vs, va = validation_points(game)
    try:
        grads = reward_grad_source(game)
    except ValueError:
        grads = None

    def evaluate(it: int, actors: ActorSet) -> dict:
        rets = evaluate_returns(game, actors, cfg.eval_episodes, seed=0)
        row = {"social_welfare": social_welfare_of(rets), "ne_gap": ne_gap(game, actors)}
        phi = potential_holder.get("phi") if potential_holder else None
        if phi is not None and grads is not None and hasattr(phi, "input_grad"):
            try:
                row["potential_residual"] = gradient_mismatch(game, phi, vs, va, grads)
            except ValueError:
                row["potential_residual"] = float("nan")
        else:
            row["potential_residual"] = float("nan")
        return row

    return evaluate


def train_spotac(game: GameSpec, cfg: TrainConfig | None = None, rng: np.random.Generator | None = None, potential=None) -> TrainResult:
    """Shared critic on phi_hat, one deterministic-gradient actor per agent.

    ``potential`` overrides the potential source; otherwise the game's analytic
    potential is used when ``cfg.use_analytic_potential`` is set, and phi_hat is
    re-estimated from the replay buffer every ``cfg.phi_refresh`` iterations.
    """
    cfg = cfg or TrainConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    t0 = time.perf_counter()
    init_rng, est_rng, loop_rng = rng.spawn(3)
    actors = make_actors(game, cfg, init_rng)
    critic = CriticModel.create(game.state_dim + game.total_action_dim, cfg.hidden, init_rng, cfg.tau)
    holder: dict = {"phi": None}
    refresh = None
    if potential is not None:
        holder["phi"] = potential
    elif cfg.use_analytic_potential:
        holder["phi"] = AnalyticPotential(game)
    else:
        est_opt = OptimizerState(cfg.residual.optimizer, cfg.residual.lr, clip_norm=cfg.residual.clip_norm)

        def refresh(buf: ReplayBuffer, it: int) -> None:
            rcfg = cfg.residual if holder["phi"] is None else replace(cfg.residual, iterations=cfg.refresh_iterations)
            res = estimate_potential(game, rcfg, est_rng, buffer=buf, model=holder["phi"], opt=est_opt)
            holder["phi"] = res.model

    def payoff(S, A, R):
        return holder["phi"].value(S, A)

    head = _Head(critic, slice(0, game.total_action_dim), payoff, list(range(game.n_agents)), OptimizerState("adam", cfg.lr_critic, clip_norm=cfg.clip_norm))
    trace = _loop(game, cfg, loop_rng, actors, [head], list(range(game.n_agents)), refresh, _evaluator(game, cfg, holder))
    return TrainResult(actors, [critic], holder["phi"], trace, cfg.steps, time.perf_counter() - t0)


def train_independent(game: GameSpec, cfg: TrainConfig | None = None, rng: np.random.Generator | None = None) -> TrainResult:
    """Selfish baseline: agent i's critic sees (s, a_i) and regresses R_i."""
    cfg = cfg or TrainConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    t0 = time.perf_counter()
    init_rng, _, loop_rng = rng.spawn(3)
    actors = make_actors(game, cfg, init_rng)
    heads = []
    for i in range(game.n_agents):
        sl = game.agent_slice(i)
        critic = CriticModel.create(game.state_dim + game.action_dims[i], cfg.hidden, init_rng, cfg.tau)
        heads.append(_Head(critic, sl, (lambda S, A, R, i=i: R[:, i]), [i], OptimizerState("adam", cfg.lr_critic, clip_norm=cfg.clip_norm)))
    trace = _loop(game, cfg, loop_rng, actors, heads, list(range(game.n_agents)), None, _evaluator(game, cfg, None))
    return TrainResult(actors, [h.critic for h in heads], None, trace, cfg.steps, time.perf_counter() - t0)


@dataclass
class BestResponseResult:
    agent: int
    policy: GaussianPolicy
    br_value: float
    current_value: float
    br_stderr: float
    current_stderr: float

    @property
    def gain(self) -> float:
        return self.br_value - self.current_value

    @property
    def stderr(self) -> float:
        return float(np.hypot(self.br_stderr, self.current_stderr))


def train_best_response(
    game: GameSpec,
    frozen: ActorSet,
    i: int,
    cfg: TrainConfig | None = None,
    rng: np.random.Generator | None = None,
    eval_episodes: int = 100,
    eval_seed: int = 0,
) -> BestResponseResult:
    """Single-agent actor-critic on R_i against deterministic frozen opponents.

    The learner starts from a copy of agent i's current actor. Both values are
    undiscounted mean returns over ``eval_episodes`` deterministic episodes
    drawn with the same initial-state stream.
    """
    cfg = cfg or TrainConfig(steps=5000)
    rng = rng if rng is not None else np.random.default_rng(0)
    init_rng, _, loop_rng = rng.spawn(3)
    actors = frozen.copy()
    critic = CriticModel.create(game.state_dim + game.total_action_dim, cfg.hidden, init_rng, cfg.tau)
    head = _Head(critic, slice(0, game.total_action_dim), (lambda S, A, R: R[:, i]), [i], OptimizerState("adam", cfg.lr_critic, clip_norm=cfg.clip_norm))
    _loop(game, cfg, loop_rng, actors, [head], [i], None, None)
    br = evaluate_returns(game, actors, eval_episodes, seed=eval_seed)[:, i]
    cur = evaluate_returns(game, frozen, eval_episodes, seed=eval_seed)[:, i]
    se = lambda x: float(x.std(ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0
    return BestResponseResult(i, actors.actors[i], float(br.mean()), float(cur.mean()), se(br), se(cur))


# fitted Q on the potential


@dataclass
class SpotqResult:
    greedy: Callable[[np.ndarray], np.ndarray]
    Q: np.ndarray | None = None
    critic: CriticModel | None = None
    deltas: list[float] = field(default_factory=list)


def train_spotq_tabular(mdp: TabularMdp, iterations: int = 10_000, tol: float = 1e-10, rng: np.random.Generator | None = None, samples: int = 0) -> SpotqResult:
    """Fitted-Q iteration with the tabular function class.

    Each round regresses Q onto phi(s, a) + gamma * max_a' Q(s', a'). With
    ``samples = 0`` the regression targets use the transition table
    directly; otherwise each (s, a) averages ``samples`` sampled next states.
    """
    S, A = mdp.reward.shape
    Q = np.zeros((S, A))
    deltas = []
    cdf = np.cumsum(mdp.transitions, axis=2) if samples else None
    for _ in range(iterations):
        V = Q.max(axis=1)
        if samples:
            u = rng.random((S, A, samples))
            nxt = np.minimum((u[..., None] > cdf[:, :, None, :]).sum(axis=3), S - 1)
            future = V[nxt].mean(axis=2)
        else:
            future = mdp.transitions @ V
        Q_new = mdp.reward + mdp.gamma * future
        deltas.append(float(np.max(np.abs(Q_new - Q))))
        Q = Q_new
        if deltas[-1] < tol:
            break
    policy = np.argmax(Q, axis=1)
    return SpotqResult(lambda s_idx: policy[np.asarray(s_idx)], Q, None, deltas)


def train_spotq(game: GameSpec, cfg: TrainConfig | None = None, rng: np.random.Generator | None = None, potential=None) -> SpotqResult:
    """Continuous fitted Q on phi with the sampling max; no actors.

    Data come from uniformly random joint actions. The greedy action at s is
    the best of ``cfg.proxy_samples`` uniform candidates under F.
    """
    cfg = cfg or TrainConfig(max_proxy="sampling")
    rng = rng if rng is not None else np.random.default_rng(0)
    init_rng, env_rng, batch_rng, greedy_rng = rng.spawn(4)
    phi = potential if potential is not None else AnalyticPotential(game)
    critic = CriticModel.create(game.state_dim + game.total_action_dim, cfg.hidden, init_rng, cfg.tau)
    opt = OptimizerState("adam", cfg.lr_critic, clip_norm=cfg.clip_norm)
    buf = ReplayBuffer.for_game(game, cfg.buffer)
    s, t = np.asarray(game.initial_state_sampler(env_rng), dtype=np.float64), 0
    deltas = []
    for step in range(cfg.steps):
        a = game.sample_actions(env_rng, 1)[0]
        s2 = game.step(s, a, env_rng)
        t += 1
        done = t >= game.horizon or game.is_done(s2)
        buf.add(TransitionSample(s, a, s2, game.rewards(s, a), done))
        s, t = (np.asarray(game.initial_state_sampler(env_rng), dtype=np.float64), 0) if done else (s2, t)
        if len(buf) >= min(cfg.warmup, cfg.buffer):
            idx = buf.sample_indices(cfg.batch, batch_rng)
            S, A, S2, _, D = buf.arrays(idx)
            Y = spotq_target(phi.value(S, A), S2, D, critic, cfg.gamma, None, batch_rng, game.action_low, game.action_high, cfg.proxy_samples)
            deltas.append(critic_fit(critic, S, A, Y, opt))

    cand = greedy_rng.uniform(game.action_low, game.action_high, size=(cfg.proxy_samples * 16, game.total_action_dim))

    def greedy(s):
        s = np.atleast_2d(s)
        out = []
        for row in s:
            vals = critic.value(np.repeat(row[None], len(cand), axis=0), cand)
            out.append(cand[int(np.argmax(vals))])
        return np.asarray(out)

    return SpotqResult(greedy, None, critic, deltas)
