"""Potential-function estimation from reward derivatives or reward differences.

The gradient-mode objective: for a probe (s, eta) with Gaussian joint policy
centred at eta, agent i's residual is

    g^i = E_a[ score_i(a) (x) D_i(s, a) ],
    D_i = [d/da_i (R_i - phi), d/ds (R_i - phi)]    (blocks stacked)

and the loss is the probe average of N^-1 sum_i |g^i|^2. A fitted phi that
satisfies the unilateral-deviation identity makes every D_i vanish, so the
loss and its gradient are exactly zero there.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional

import numpy as np

from .approx import (
    DegeneratePolicyError,
    DenseNet,
    GaussianPolicy,
    NumericError,
    OptimizerState,
    PolyBasis,
    model_from_dict,
    optimizer_step,
)
from .game import GameSpec, ReplayBuffer

log = logging.getLogger(__name__)

GradSource = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


class PotentialEstimationError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# models


@dataclass
class PotentialModel:
    """phi_hat(s, a) = body([s, a]) + shift."""

    body: object
    state_dim: int
    action_dim: int
    shift: float = 0.0

    def __post_init__(self):
        if self.body.input_dim != self.state_dim + self.action_dim:
            raise ValueError("potential body input must be state_dim + total action dim")

    @classmethod
    def poly(cls, game: GameSpec, degree: int = 2) -> "PotentialModel":
        return cls(PolyBasis(game.state_dim + game.total_action_dim, degree), game.state_dim, game.total_action_dim)

    @classmethod
    def dense(cls, game: GameSpec, rng: np.random.Generator, hidden=(64, 64)) -> "PotentialModel":
        dims = [game.state_dim + game.total_action_dim, *hidden, 1]
        return cls(DenseNet.create(dims, rng), game.state_dim, game.total_action_dim)

    @property
    def input_dim(self) -> int:
        return self.state_dim + self.action_dim

    @property
    def n_params(self) -> int:
        return self.body.n_params

    def get_params(self) -> np.ndarray:
        return self.body.get_params()

    def set_params(self, flat: np.ndarray) -> None:
        self.body.set_params(flat)

    def copy(self) -> "PotentialModel":
        return PotentialModel(self.body.copy(), self.state_dim, self.action_dim, self.shift)

    def _x(self, s, a) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        return np.concatenate([s, a], axis=1)

    def value(self, s, a) -> np.ndarray:
        return self.body.forward(self._x(s, a))[:, 0] + self.shift

    __call__ = value

    def input_grad(self, s, a) -> tuple[np.ndarray, np.ndarray]:
        """(dphi/da (B, A), dphi/ds (B, S))."""
        x = self._x(s, a)
        _, g = self.body.gradients(x, np.ones((x.shape[0], 1)))
        return g[:, self.state_dim :], g[:, : self.state_dim]

    def canonicalize(self, s0, a0) -> None:
        """Fix the additive constant so that phi_hat(s0, a0) = 0."""
        self.shift -= float(self.value(s0, a0)[0])

    def coefficient_table(self, game: GameSpec | None = None) -> dict[str, float] | None:
        if not isinstance(self.body, PolyBasis):
            return None
        coef = self.body.coef.copy()
        coef[0] += self.shift
        return dict(zip(self.body.feature_names(input_names(game) if game else None), coef.tolist()))

    def to_dict(self) -> dict:
        return {"kind": "potential", "state_dim": self.state_dim, "action_dim": self.action_dim, "shift": self.shift, "body": self.body.to_dict()}


class AnalyticPotential:
    """Wraps a game's closed-form potential behind the PotentialModel calls."""

    def __init__(self, game: GameSpec):
        if game.analytic_potential is None:
            raise ValueError(f"game {game.name!r} has no analytic potential")
        self.game = game

    def value(self, s, a) -> np.ndarray:
        return self.game.analytic_potential(np.atleast_2d(s), np.atleast_2d(a))

    __call__ = value

    def input_grad(self, s, a):
        if self.game.potential_grad is None:
            raise ValueError(f"game {self.game.name!r} has no potential gradient")
        return self.game.potential_grad(np.atleast_2d(s), np.atleast_2d(a))

    def copy(self) -> "AnalyticPotential":
        return self

    def coefficient_table(self, game=None):
        return None


def input_names(game: GameSpec) -> list[str]:
    names = [f"s{k}" for k in range(game.state_dim)]
    for i, d in enumerate(game.action_dims):
        names += [f"a{i}"] if d == 1 else [f"a{i}.{k}" for k in range(d)]
    return names


def potential_from_dict(d: dict) -> PotentialModel:
    return PotentialModel(model_from_dict(d["body"]), int(d["state_dim"]), int(d["action_dim"]), float(d["shift"]))


def reference_point(game: GameSpec) -> tuple[np.ndarray, np.ndarray]:
    return 0.5 * (game.state_low + game.state_high), 0.5 * (game.action_low + game.action_high)


@dataclass
class RewardModel:
    """Fitted R_hat_i(s, a) for one agent."""

    agent: int
    body: object
    state_dim: int
    losses: list[float] = field(default_factory=list)
    heldout_mse: float = float("nan")

    def value(self, s, a) -> np.ndarray:
        return self.body.forward(np.concatenate([s, a], axis=1))[:, 0]

    def input_grad(self, s, a) -> tuple[np.ndarray, np.ndarray]:
        x = np.concatenate([s, a], axis=1)
        _, g = self.body.gradients(x, np.ones((x.shape[0], 1)))
        return g[:, self.state_dim :], g[:, : self.state_dim]


@dataclass
class RewardFitConfig:
    kind: Literal["poly", "dense"] = "poly"
    degree: int = 2
    hidden: tuple[int, ...] = (64, 64)
    iterations: int = 2000
    batch: int = 256
    lr: float = 1e-3
    holdout: float = 0.2


def fit_reward_models(buffer: ReplayBuffer, cfg: RewardFitConfig | None = None, rng: np.random.Generator | None = None) -> list[RewardModel]:
    """Least-squares fit of each agent's reward on (s, a); held-out MSE is stored on each model."""
    cfg = cfg or RewardFitConfig()
    rng = rng or np.random.default_rng(0)
    n = len(buffer)
    if n == 0:
        raise ValueError("cannot fit reward models on an empty buffer")
    s, a, _, r, _ = buffer.arrays()
    x = np.concatenate([s, a], axis=1)
    perm = rng.permutation(n)
    n_hold = int(round(cfg.holdout * n)) if n > 1 else 0
    hold, train = perm[:n_hold], perm[n_hold:]
    models = []
    for i in range(r.shape[1]):
        if cfg.kind == "poly":
            body = PolyBasis(x.shape[1], cfg.degree)
            losses = [body.fit_least_squares(x[train], r[train, i])]
        else:
            body = DenseNet.create([x.shape[1], *cfg.hidden, 1], rng)
            opt = OptimizerState("adam", cfg.lr)
            losses = []
            for _ in range(cfg.iterations):
                idx = rng.choice(train, size=min(cfg.batch, len(train)))
                pred = body.forward(x[idx])[:, 0]
                err = pred - r[idx, i]
                g, _ = body.gradients(x[idx], (2.0 / len(idx)) * err[:, None])
                body.set_params(optimizer_step(opt, body.get_params(), g))
                losses.append(float(np.mean(err**2)))
        m = RewardModel(i, body, s.shape[1], losses)
        if n_hold:
            m.heldout_mse = float(np.mean((body.forward(x[hold])[:, 0] - r[hold, i]) ** 2))
        models.append(m)
    return models


def reward_grad_source(game: GameSpec, reward_models: list[RewardModel] | None = None) -> GradSource:
    """Analytic reward derivatives when the game has them, else fitted models."""
    if game.reward_grad_oracle is not None:
        return game.reward_grad_oracle
    if reward_models:

        def from_models(s, a):
            parts = [m.input_grad(s, a) for m in reward_models]
            return np.stack([p[0] for p in parts], axis=1), np.stack([p[1] for p in parts], axis=1)

        return from_models
    raise ValueError(f"game {game.name!r} has no reward derivatives and no reward models were given")


def reward_value_source(game: GameSpec, reward_models: list[RewardModel] | None = None):
    if reward_models:
        return lambda s, a: np.stack([m.value(s, a) for m in reward_models], axis=1)
    return game.reward_oracle


# residual objective


@dataclass
class ResidualConfig:
    mode: Literal["gradient", "difference"] = "gradient"
    mc_actions: int = 4
    batch: int = 32
    iterations: int = 3000
    sigma_eps: float = 0.3
    eta_box: float = 1.0
    include_state: bool = True
    optimizer: Literal["adam", "sgd"] = "adam"
    lr: float = 1e-2
    clip_norm: Optional[float] = 1.0
    grad_tol: float = 1e-5
    divergence: float = 1e6
    fixed_probes: bool = False
    eval_every: int = 50
    body: Literal["poly", "dense"] = "poly"
    degree: int = 2
    hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if self.mc_actions < 1:
            raise ValueError("mc_actions must be >= 1")
        if self.sigma_eps <= 0:
            raise ValueError("sigma_eps must be positive")
        if self.mode not in ("gradient", "difference"):
            raise ValueError(f"unknown residual mode {self.mode!r}")


@dataclass
class ProbeSet:
    s: np.ndarray  # (B, S)
    eta: np.ndarray  # (B, A) pre-squash policy means
    z: np.ndarray  # (B, M, A) standard normal draws
    alt: np.ndarray | None = None  # (B, A) deviation draws for difference mode
    agent: np.ndarray | None = None  # (B,) deviating agent for difference mode


def _squash(game: GameSpec, u: np.ndarray) -> np.ndarray:
    lo, hi = game.action_low, game.action_high
    return lo + (hi - lo) * 0.5 * (np.tanh(u) + 1.0)


def draw_probes(game: GameSpec, cfg: ResidualConfig, rng: np.random.Generator, buffer: ReplayBuffer | None = None) -> ProbeSet:
    B, M, A = cfg.batch, cfg.mc_actions, game.total_action_dim
    if buffer is not None and len(buffer):
        s = buffer.s[buffer.sample_indices(B, rng)].copy()
    else:
        s = game.sample_states(rng, B)
    eta = rng.uniform(-cfg.eta_box, cfg.eta_box, size=(B, A))
    z = rng.standard_normal((B, M, A))
    if cfg.mode == "difference":
        alt = rng.uniform(-cfg.eta_box, cfg.eta_box, size=(B, A)) + cfg.sigma_eps * rng.standard_normal((B, A))
        return ProbeSet(s, eta, z, alt, rng.integers(0, game.n_agents, size=B))
    return ProbeSet(s, eta, z)


def _residual_terms(game, model: PotentialModel, probes: ProbeSet, cfg: ResidualConfig, grads: GradSource, agents):
    """Per-agent residuals g^i (B, d_i, q_i) plus what the parameter gradient needs."""
    B, M, A = probes.z.shape
    S = game.state_dim
    u = probes.eta[:, None, :] + cfg.sigma_eps * probes.z
    a = _squash(game, u).reshape(B * M, A)
    s = np.repeat(probes.s, M, axis=0)
    dRa, dRs = grads(s, a)
    dpa, dps = model.input_grad(s, a)
    out = []
    for i in agents:
        sl = game.agent_slice(i)
        blocks = [dRa[:, i, sl] - dpa[:, sl]]
        if cfg.include_state:
            blocks.append(dRs[:, i] - dps)
        D = np.concatenate(blocks, axis=1).reshape(B, M, -1)
        score = probes.z[:, :, sl] / cfg.sigma_eps
        g = np.einsum("bmp,bmq->bpq", score, D) / M
        out.append((i, g, score))
    return out, np.concatenate([s, a], axis=1)


def _direction(game, cfg, terms, x_shape) -> np.ndarray:
    """Input-space weights w with dLoss/drho = -(2/(B N M)) d/drho sum w . grad_x phi."""
    B, M = terms[0][2].shape[:2]
    S = game.state_dim
    W = np.zeros(x_shape)
    for i, g, score in terms:
        sl = game.agent_slice(i)
        d_i = sl.stop - sl.start
        w = np.einsum("bpq,bmp->bmq", g, score).reshape(B * M, -1)
        W[:, S + sl.start : S + sl.stop] += w[:, :d_i]
        if cfg.include_state:
            W[:, :S] += w[:, d_i:]
    return W


def gradient_loss_and_grad(game, model: PotentialModel, probes: ProbeSet, cfg: ResidualConfig, grads: GradSource, agents=None):
    agents = list(range(game.n_agents)) if agents is None else list(agents)
    terms, x = _residual_terms(game, model, probes, cfg, grads, agents)
    B, M = probes.z.shape[:2]
    n = len(agents)
    loss = float(sum(np.sum(g * g) for _, g, _ in terms) / (B * n))
    W = _direction(game, cfg, terms, x.shape)
    grad = -(2.0 / (B * n * M)) * model.body.mixed_param_grad(x, W)
    return loss, grad


def difference_loss_and_grad(game, model: PotentialModel, probes: ProbeSet, cfg: ResidualConfig, values, agents=None):
    """Mean squared mismatch of unilateral-deviation differences."""
    B = probes.s.shape[0]
    base_u = probes.eta + cfg.sigma_eps * probes.z[:, 0, :]
    a0 = _squash(game, base_u)
    a1 = a0.copy()
    alt = _squash(game, probes.alt)
    who = probes.agent
    for i in range(game.n_agents):
        sl = game.agent_slice(i)
        a1[who == i, sl] = alt[who == i, sl]
    keep = np.ones(B, dtype=bool) if agents is None else np.isin(who, list(agents))
    if not np.any(keep):
        return 0.0, np.zeros(model.n_params)
    s, a0, a1, who = probes.s[keep], a0[keep], a1[keep], who[keep]
    rows = np.arange(len(who))
    dR = values(s, a1)[rows, who] - values(s, a0)[rows, who]
    err = (model.value(s, a1) - model.value(s, a0)) - dR
    n = len(who)
    x0 = np.concatenate([s, a0], axis=1)
    x1 = np.concatenate([s, a1], axis=1)
    up = (2.0 / n) * err[:, None]
    g1, _ = model.body.gradients(x1, up)
    g0, _ = model.body.gradients(x0, up)
    return float(np.mean(err**2)), g1 - g0


def residual_gi(
    game: GameSpec,
    i: int,
    s: np.ndarray,
    policies: list[GaussianPolicy],
    model: PotentialModel | None,
    cfg: ResidualConfig,
    rng: np.random.Generator,
    reward_models: list[RewardModel] | None = None,
) -> np.ndarray:
    """Monte-Carlo g^i at state ``s`` for the joint policy ``policies``.

    Rows of the result index agent i's policy parameters, columns the stacked
    derivative blocks; it is returned flattened. ``model=None`` means phi_hat = 0.
    """
    grads = reward_grad_source(game, reward_models)
    for p in policies:
        if p.sigma <= 0:
            raise DegeneratePolicyError("residual needs sigma > 0")
    M = cfg.mc_actions
    s = np.asarray(s, dtype=np.float64).reshape(1, -1)
    sb = np.repeat(s, M, axis=0)
    a = np.concatenate([p.sample(sb, rng) for p in policies], axis=1)
    dRa, dRs = grads(sb, a)
    if model is None:
        dpa, dps = np.zeros_like(a), np.zeros_like(sb)
    else:
        dpa, dps = model.input_grad(sb, a)
    sl = game.agent_slice(i)
    blocks = [dRa[:, i, sl] - dpa[:, sl]]
    if cfg.include_state:
        blocks.append(dRs[:, i] - dps)
    D = np.concatenate(blocks, axis=1)
    score = policies[i].score(sb, a[:, sl])
    return (score.T @ D / M).ravel()


# estimation


@dataclass
class EstimationResult:
    model: PotentialModel
    loss_trace: list[float]
    mismatch_trace: list[tuple[int, float]]
    iterations: int
    grad_norm: float
    converged: bool
    mode: str

    def report(self, game: GameSpec | None = None) -> dict:
        return {
            "mode": self.mode,
            "iterations": self.iterations,
            "final_loss": self.loss_trace[-1] if self.loss_trace else None,
            "grad_norm": self.grad_norm,
            "converged": self.converged,
            "coefficients": self.model.coefficient_table(game),
            "mismatch_trace": self.mismatch_trace,
        }


def gradient_mismatch(game: GameSpec, model: PotentialModel, s, a, grads: GradSource) -> float:
    """sum_i mean |d R_i/d a_i - d phi_hat/d a_i| over the given points."""
    dRa, _ = grads(s, a)
    dpa, _ = model.input_grad(s, a)
    total = 0.0
    for i in range(game.n_agents):
        sl = game.agent_slice(i)
        total += float(np.mean(np.linalg.norm(dRa[:, i, sl] - dpa[:, sl], axis=1)))
    return total


def validation_points(game: GameSpec, n: int = 256, seed: int = 12345):
    rng = np.random.default_rng(seed)
    return game.sample_states(rng, n), game.sample_actions(rng, n)


def _init_model(game: GameSpec, cfg: ResidualConfig, rng: np.random.Generator) -> PotentialModel:
    if cfg.body == "poly":
        return PotentialModel.poly(game, cfg.degree)
    return PotentialModel.dense(game, rng, cfg.hidden)


def _loss_fn(game, cfg, reward_models):
    if cfg.mode == "gradient":
        grads = reward_grad_source(game, reward_models)
        return lambda model, probes, agents=None: gradient_loss_and_grad(game, model, probes, cfg, grads, agents)
    values = reward_value_source(game, reward_models)
    return lambda model, probes, agents=None: difference_loss_and_grad(game, model, probes, cfg, values, agents)


def estimate_potential(
    game: GameSpec,
    cfg: ResidualConfig | None = None,
    rng: np.random.Generator | None = None,
    buffer: ReplayBuffer | None = None,
    reward_models: list[RewardModel] | None = None,
    model: PotentialModel | None = None,
    opt: OptimizerState | None = None,
) -> EstimationResult:
    """Stochastic descent on the residual loss over freshly drawn probes.

    States come from ``buffer`` when given, otherwise from the game's state
    sampler. Stops at the iteration cap or once the parameter gradient norm
    drops below ``cfg.grad_tol``. Passing ``model`` and ``opt`` from an earlier
    call resumes that run instead of restarting the optimizer.
    """
    cfg = cfg or ResidualConfig()
    rng = rng or np.random.default_rng(0)
    if reward_models is None and buffer is not None and game.reward_grad_oracle is None:
        reward_models = fit_reward_models(buffer, rng=rng)
    model = model.copy() if model is not None else _init_model(game, cfg, rng)
    loss_fn = _loss_fn(game, cfg, reward_models)
    grads_src = reward_grad_source(game, reward_models) if (game.reward_grad_oracle or reward_models) else None
    vs, va = validation_points(game)
    opt = opt if opt is not None else OptimizerState(cfg.optimizer, cfg.lr, clip_norm=cfg.clip_norm)
    fixed = draw_probes(game, cfg, rng, buffer) if cfg.fixed_probes else None
    losses: list[float] = []
    mismatch: list[tuple[int, float]] = []
    gnorm, converged, it = float("inf"), False, 0
    for it in range(1, cfg.iterations + 1):
        probes = fixed if fixed is not None else draw_probes(game, cfg, rng, buffer)
        loss, grad = loss_fn(model, probes)
        if not np.isfinite(loss) or loss > cfg.divergence:
            raise PotentialEstimationError(
                f"potential estimation diverged at iteration {it} (loss {loss:.3g})",
                {"iteration": it, "loss": loss, "recent_losses": losses[-10:], "param_norm": float(np.linalg.norm(model.get_params()))},
            )
        losses.append(loss)
        gnorm = float(np.linalg.norm(grad))
        if grads_src is not None and (it == 1 or it % cfg.eval_every == 0):
            mismatch.append((it, gradient_mismatch(game, model, vs, va, grads_src)))
        if gnorm < cfg.grad_tol:
            converged = True
            break
        try:
            model.set_params(optimizer_step(opt, model.get_params(), grad))
        except NumericError as exc:
            raise PotentialEstimationError(f"numeric failure at iteration {it}: {exc}", {"iteration": it}) from exc
    if grads_src is not None:
        mismatch.append((it, gradient_mismatch(game, model, vs, va, grads_src)))
    model.canonicalize(*reference_point(game))
    log.info("potential estimate: %d iterations, final loss %.3g", it, losses[-1])
    return EstimationResult(model, losses, mismatch, it, gnorm, converged, cfg.mode)


# consensus


def topology_adjacency(topology, n: int) -> np.ndarray:
    if isinstance(topology, str):
        adj = np.zeros((n, n), dtype=bool)
        if topology == "complete":
            adj[:] = True
        elif topology == "ring":
            for i in range(n):
                adj[i, (i + 1) % n] = adj[(i + 1) % n, i] = True
        elif topology == "line":
            for i in range(n - 1):
                adj[i, i + 1] = adj[i + 1, i] = True
        else:
            raise ValueError(f"unknown topology {topology!r}; use ring, line, complete or an adjacency matrix")
    else:
        adj = np.asarray(topology, dtype=bool)
        if adj.shape != (n, n) or not np.array_equal(adj, adj.T):
            raise ValueError("adjacency must be a symmetric n x n matrix")
    np.fill_diagonal(adj, False)
    seen, todo = {0}, [0]
    while todo:
        k = todo.pop()
        for j in np.flatnonzero(adj[k]):
            if j not in seen:
                seen.add(int(j))
                todo.append(int(j))
    if len(seen) != n:
        raise ValueError("communication graph is disconnected")
    return adj


def metropolis_weights(adj: np.ndarray) -> np.ndarray:
    adj = np.asarray(adj, dtype=bool)
    deg = adj.sum(axis=1)
    n = len(deg)
    C = np.zeros((n, n))
    for i in range(n):
        for j in np.flatnonzero(adj[i]):
            C[i, j] = 1.0 / (1.0 + max(deg[i], deg[j]))
        C[i, i] = 1.0 - C[i].sum()
    return C


def check_doubly_stochastic(C: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError("consensus matrix must be square")
    if np.any(C < -tol) or not np.allclose(C.sum(axis=0), 1.0, atol=tol) or not np.allclose(C.sum(axis=1), 1.0, atol=tol):
        raise ValueError("consensus matrix must be non-negative and doubly stochastic")
    return C


@dataclass(frozen=True)
class ConsensusState:
    rho: np.ndarray  # (N, P)
    kappa: np.ndarray  # (N, P)
    C: np.ndarray
    alpha: float
    last_grad: np.ndarray  # (N, P), gradient at the current rho
    round: int = 0

    def __post_init__(self):
        check_doubly_stochastic(self.C)

    def agreement(self) -> float:
        diff = self.rho[:, None, :] - self.rho[None, :, :]
        return float(np.max(np.linalg.norm(diff, axis=2)))

    def tracking_error(self) -> float:
        return float(np.max(np.abs(self.kappa.sum(axis=0) - self.last_grad.sum(axis=0))))


def _eval_grads(oracles, rho: np.ndarray) -> np.ndarray:
    return np.stack([np.asarray(oracles[i](rho[i]), dtype=np.float64) for i in range(rho.shape[0])])


def consensus_init(rho0: np.ndarray, C: np.ndarray, alpha: float, oracles) -> ConsensusState:
    rho0 = np.atleast_2d(np.asarray(rho0, dtype=np.float64))
    g = _eval_grads(oracles, rho0)
    return ConsensusState(rho0.copy(), g.copy(), np.asarray(C, dtype=np.float64), alpha, g)


def consensus_round(state: ConsensusState, oracles) -> ConsensusState:
    """rho <- C rho - alpha kappa; kappa <- C kappa + grad(rho_new) - grad(rho_old)."""
    rho = state.C @ state.rho - state.alpha * state.kappa
    g = _eval_grads(oracles, rho)
    kappa = state.C @ state.kappa + g - state.last_grad
    return ConsensusState(rho, kappa, state.C, state.alpha, g, state.round + 1)


@dataclass
class ConsensusResult:
    models: list[PotentialModel]
    agreement: list[float]
    losses: list[float]
    tracking_error: list[float]
    rounds: int

    def report(self, game: GameSpec | None = None) -> dict:
        return {
            "mode": "consensus",
            "iterations": self.rounds,
            "final_loss": self.losses[-1] if self.losses else None,
            "coefficients": self.models[0].coefficient_table(game),
            "agreement_trace": self.agreement,
            "max_tracking_error": max(self.tracking_error) if self.tracking_error else 0.0,
        }


def estimate_potential_consensus(
    game: GameSpec,
    cfg: ResidualConfig | None = None,
    rng: np.random.Generator | None = None,
    topology="ring",
    alpha: float = 1e-2,
    rounds: int = 5000,
    agree_tol: float = 1e-3,
    buffers: list[ReplayBuffer] | None = None,
    reward_models: list[RewardModel] | None = None,
    C: np.ndarray | None = None,
) -> ConsensusResult:
    """Each agent descends its own residual |g^i|^2 on a fixed probe set.

    Agent i only reads its own reward derivatives; parameters are mixed
    through the Metropolis matrix of ``topology`` with gradient tracking.
    With one agent this is plain gradient descent at step ``alpha``.
    """
    cfg = cfg or ResidualConfig()
    rng = rng or np.random.default_rng(0)
    N = game.n_agents
    if C is None:
        C = metropolis_weights(topology_adjacency(topology, N)) if N > 1 else np.ones((1, 1))
    C = check_doubly_stochastic(C)
    base = _init_model(game, cfg, rng)
    loss_fn = _loss_fn(game, cfg, reward_models)
    probe_sets = [draw_probes(game, cfg, rng, buffers[i] if buffers else None) for i in range(N)]
    work = [base.copy() for _ in range(N)]

    def oracle(i):
        def f(rho):
            work[i].set_params(rho)
            return loss_fn(work[i], probe_sets[i], [i])[1]

        return f

    oracles = [oracle(i) for i in range(N)]
    state = consensus_init(np.tile(base.get_params(), (N, 1)), C, alpha, oracles)
    agreement, losses, tracking = [state.agreement()], [], []
    for _ in range(rounds):
        state = consensus_round(state, oracles)
        if not np.all(np.isfinite(state.rho)):
            raise PotentialEstimationError(f"consensus diverged at round {state.round}", {"round": state.round})
        agreement.append(state.agreement())
        tracking.append(state.tracking_error())
        if state.round % cfg.eval_every == 0 or state.round == rounds:
            lo = 0.0
            for i in range(N):
                work[i].set_params(state.rho[i])
                lo += loss_fn(work[i], probe_sets[i], [i])[0]
            losses.append(lo / N)
            if lo / N > cfg.divergence:
                raise PotentialEstimationError(f"consensus diverged at round {state.round}", {"round": state.round, "loss": lo / N})
        if agreement[-1] < agree_tol and np.max(np.linalg.norm(state.kappa, axis=1)) < cfg.grad_tol:
            break
    s0, a0 = reference_point(game)
    models = []
    for i in range(N):
        m = base.copy()
        m.set_params(state.rho[i])
        m.canonicalize(s0, a0)
        models.append(m)
    return ConsensusResult(models, agreement, losses, tracking, state.round)


# nascent-delta probe


def nascent_bound_probe(
    game: GameSpec,
    F: Callable[[np.ndarray, np.ndarray], np.ndarray],
    sigmas,
    rng: np.random.Generator,
    n_samples: int = 10_000,
    n_pairs: int = 16,
    clip: bool = True,
    agent: int = 0,
) -> list[dict]:
    """Gap between pure and Gaussian-smoothed unilateral deviation differences of F.

    For probe pairs (a, a') differing in ``agent``'s action, compares
    F(s, a') - F(s, a) against E[F(s, a' + sigma z)] - E[F(s, a + sigma z)].
    The same normal draws are used for every sigma and both endpoints.
    """
    if any(sg <= 0 for sg in sigmas):
        raise ValueError("sigma values must be positive")
    s = game.sample_states(rng, n_pairs)
    a = game.sample_actions(rng, n_pairs)
    a_dev = a.copy()
    sl = game.agent_slice(agent)
    a_dev[:, sl] = game.sample_actions(rng, n_pairs)[:, sl]
    z = rng.standard_normal((n_samples, game.total_action_dim))
    pure = F(s, a_dev) - F(s, a)
    table = []
    for sg in sigmas:
        gaps, ses = [], []
        for k in range(n_pairs):
            x0 = a[k] + sg * z
            x1 = a_dev[k] + sg * z
            if clip:
                x0 = np.clip(x0, game.action_low, game.action_high)
                x1 = np.clip(x1, game.action_low, game.action_high)
            sk = np.repeat(s[k : k + 1], n_samples, axis=0)
            d = F(sk, x1) - F(sk, x0)
            gaps.append(abs(pure[k] - d.mean()))
            ses.append(d.std(ddof=1) / np.sqrt(n_samples))
        table.append({"sigma": float(sg), "gap": float(np.mean(gaps)), "stderr": float(np.sqrt(np.sum(np.square(ses))) / n_pairs)})
    return table


def write_report(path, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, default=float)
