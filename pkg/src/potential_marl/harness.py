"""Run experiments from a config: build the game, train, evaluate, write artifacts.

Every run writes into one output directory:

    metrics.csv            one MetricsRow per evaluation point
    events.jsonl           run lifecycle and evaluation events
    potential_report.json  potential diagnostics keyed by run id
    checkpoints/<run_id>/  actors.json, critic_<k>.npz, potential.json
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .approx import save_model
from .config import ConfigError, EnvSection, ExperimentConfig
from .envs import (
    AblationConfig,
    CournotParams,
    NavParams,
    ablate,
    braess_network,
    cournot_game,
    load_network,
    nav_game,
    random_layered_network,
    routing_game,
    team_game,
)
from .game import GameSpec, check_potentiality
from .learners import train_independent, train_spotac, train_spotq
from .metrics import CSV_HEADER, MetricsRow, evaluate_returns, exploitability, ne_gap, social_welfare_of
from .potential import AnalyticPotential, estimate_potential_consensus, write_report

log = logging.getLogger(__name__)

STREAMS = ("env", "policy", "estimator", "eval")


def configure_logging() -> None:
    level = os.environ.get("LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose, fixed by (seed, name)."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class UnknownEnvError(ConfigError):
    pass


def _cournot(env: EnvSection, gamma: float) -> GameSpec:
    return cournot_game(CournotParams(env.n_agents, env.alpha, env.beta, env.gamma_cost, env.caps, discount=gamma))


def _routing(env: EnvSection, gamma: float) -> GameSpec:
    demands = None if env.demand is None else [env.demand] * env.n_agents
    if env.network == "braess":
        net = braess_network(env.n_agents, demands)
    elif env.network == "random":
        net = random_layered_network(env.layers, env.width, env.net_seed, env.n_agents, demands)
    else:
        net = load_network(env.network, env.n_agents, demands)
    return routing_game(net, discount=gamma)


def _braess(env: EnvSection, gamma: float) -> GameSpec:
    return routing_game(braess_network(env.n_agents, None if env.demand is None else [env.demand] * env.n_agents), discount=gamma)


def _nav(env: EnvSection, gamma: float) -> GameSpec:
    return nav_game(NavParams(n_agents=env.n_agents, target=tuple(env.target), beta=env.repulsion, eps=env.nav_eps, horizon=env.horizon, discount=gamma))


ENVS = {"cournot": _cournot, "routing": _routing, "braess": _braess, "nav": _nav}


def build_game(env: EnvSection, gamma: float = 0.99) -> GameSpec:
    if env.name not in ENVS:
        raise UnknownEnvError(f"unknown env {env.name!r}; available: {', '.join(sorted(ENVS))}")
    game = ENVS[env.name](env, gamma)
    if env.team:
        game = team_game(game)
    if env.ablation is not None:
        game = ablate(AblationConfig(game, env.ablation, env.c))
    return game


class _GreedyAgent:
    """Policy view of agent i's slice of a joint greedy action."""

    def __init__(self, greedy, sl: slice):
        self.greedy, self.sl = greedy, sl
        self.action_dim = sl.stop - sl.start

    def mean_action(self, s):
        return self.greedy(np.atleast_2d(s))[:, self.sl]


@dataclass
class RunRecord:
    run_id: str
    seed: int
    rows: list[MetricsRow]
    potential_report: dict
    checkpoint: Path | None = None


@dataclass
class ExperimentResult:
    out_dir: Path
    runs: list[RunRecord] = field(default_factory=list)

    @property
    def rows(self) -> list[MetricsRow]:
        return [r for run in self.runs for r in run.rows]


def run_id_for(cfg: ExperimentConfig, seed: int, overrides: dict) -> str:
    tag = "".join(f"-{k.split('.')[-1]}{v:g}" if isinstance(v, float) else f"-{k.split('.')[-1]}{v}" for k, v in overrides.items())
    return f"{cfg.env.name}-{cfg.algo.name}{tag}-s{seed}"


class _Events:
    def __init__(self, path: Path, wall: bool):
        self.fh = open(path, "w")
        self.wall = wall

    def emit(self, event: str, **data) -> None:
        rec = {"event": event, **{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in data.items()}}
        if self.wall:
            rec["time"] = time.time()
        self.fh.write(json.dumps(rec, default=float) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def _potential_report(game: GameSpec, phi, rng: np.random.Generator) -> dict:
    if phi is None:
        return {"source": "none"}
    report: dict = {"source": "analytic" if isinstance(phi, AnalyticPotential) else "estimated"}
    if hasattr(phi, "coefficient_table"):
        report["coefficients"] = phi.coefficient_table(game)
    tol = 1e-9 if report["source"] == "analytic" else 1e-2
    report["potentiality_check"] = check_potentiality(game, phi.value, 1000, tol, rng).to_json()
    return report


def _save_checkpoint(path: Path, actors, critics, phi) -> None:
    path.mkdir(parents=True, exist_ok=True)
    if actors is not None:
        with open(path / "actors.json", "w") as fh:
            json.dump(actors.to_dict(), fh)
    for k, c in enumerate(critics):
        save_model(c.net, path / f"critic_{k}.npz")
    if phi is not None and hasattr(phi, "to_dict"):
        with open(path / "potential.json", "w") as fh:
            json.dump(phi.to_dict(), fh)


def run_single(cfg: ExperimentConfig, seed: int, run_id: str, events: _Events | None = None, ckpt_dir: Path | None = None) -> RunRecord:
    game = build_game(cfg.env, cfg.algo.gamma)
    tcfg = cfg.algo.train_config(cfg.eval.eval_every, cfg.eval.eval_episodes)
    rng = {name: substream(seed, name) for name in STREAMS}
    if events:
        events.emit("run_start", run_id=run_id, seed=seed, env=game.name, algo=cfg.algo.name)
    wall = cfg.run.record_wall_time
    if cfg.algo.name == "spotq":
        t0 = time.perf_counter()
        res = train_spotq(game, replace(tcfg, max_proxy="sampling"), rng["policy"])
        agents = [_GreedyAgent(res.greedy, game.agent_slice(i)) for i in range(game.n_agents)]
        rets = evaluate_returns(game, agents, cfg.eval.eval_episodes, seed=seed)
        trace = [{"steps": tcfg.steps, "social_welfare": social_welfare_of(rets), "ne_gap": ne_gap(game, agents), "potential_residual": 0.0, "wall_s": time.perf_counter() - t0}]
        actors, critics, phi = None, [res.critic], AnalyticPotential(game)
    else:
        potential = None
        if cfg.algo.name == "spotac" and cfg.algo.consensus and not cfg.algo.use_analytic_potential:
            cons = estimate_potential_consensus(game, cfg.algo.residual_config(), rng["estimator"], cfg.algo.topology, cfg.algo.consensus_alpha, cfg.algo.consensus_rounds)
            potential = cons.models[0]
        res = train_spotac(game, tcfg, rng["policy"], potential) if cfg.algo.name == "spotac" else train_independent(game, tcfg, rng["policy"])
        trace, actors, critics, phi = res.trace, res.actors, res.critics, res.potential
    delta = float("nan")
    if cfg.eval.exploitability and actors is not None:
        br = replace(tcfg, steps=cfg.eval.exploitability_budget)
        delta = exploitability(game, actors, br, rng["eval"], eval_episodes=cfg.eval.eval_episodes).delta
    rows = []
    for k, tr in enumerate(trace):
        last = k == len(trace) - 1
        row = MetricsRow(
            run_id=run_id,
            seed=seed,
            env=game.name,
            algo=cfg.algo.name,
            iteration=int(tr["steps"]),
            episodes=cfg.eval.eval_episodes,
            social_welfare=float(tr["social_welfare"]),
            exploitability=delta if last else float("nan"),
            ne_gap=float(tr["ne_gap"]),
            potential_residual=float(tr["potential_residual"]),
            wall_ms=int(round(1000 * tr["wall_s"])) if wall else 0,
        )
        rows.append(row)
        if events:
            events.emit("eval", run_id=run_id, **{k2: v for k2, v in row.__dict__.items() if k2 not in ("run_id", "wall_ms")})
    report = _potential_report(game, phi, rng["env"])
    ckpt = None
    if ckpt_dir is not None:
        ckpt = ckpt_dir / run_id
        _save_checkpoint(ckpt, actors, critics, phi if not isinstance(phi, AnalyticPotential) else None)
    if events:
        events.emit("run_end", run_id=run_id, potential_check_passed=report.get("potentiality_check", {}).get("pass"))
    return RunRecord(run_id, seed, rows, report, ckpt)


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> ExperimentResult:
    """Run every (sweep value, seed) pair and write artifacts to ``out_dir``."""
    out = Path(out_dir if out_dir is not None else cfg.run.output_dir)
    build_game(cfg.env, cfg.algo.gamma)  # fail fast on a bad env
    out.mkdir(parents=True, exist_ok=True)
    result = ExperimentResult(out)
    events = _Events(out / "events.jsonl", cfg.run.record_wall_time)
    try:
        with open(out / "metrics.csv", "w") as csv_fh:
            csv_fh.write(CSV_HEADER + "\n")
            for seed, over in cfg.runs():
                run_cfg = cfg
                for key, value in over.items():
                    run_cfg = run_cfg.with_override(key, value)
                rid = run_id_for(cfg, seed, over)
                try:
                    rec = run_single(run_cfg, seed, rid, events, out / "checkpoints")
                except Exception as exc:
                    events.emit("run_error", run_id=rid, error=f"{type(exc).__name__}: {exc}")
                    raise
                for row in rec.rows:
                    csv_fh.write(row.to_csv_line())
                csv_fh.flush()
                result.runs.append(rec)
                log.info("%s: final welfare %.4f", rid, rec.rows[-1].social_welfare if rec.rows else math.nan)
        write_report(out / "potential_report.json", {r.run_id: r.potential_report for r in result.runs})
    finally:
        events.close()
    return result
