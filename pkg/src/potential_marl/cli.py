"""Command line entry point: ``potential-marl <command> --config FILE``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .game import check_potentiality, check_state_transitivity
from .harness import build_game, configure_logging, run_experiment, substream
from .potential import PotentialEstimationError, estimate_potential, estimate_potential_consensus, potential_from_dict, write_report


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.model_copy(update={"run": cfg.run.model_copy(update={"seeds": [args.seed]})})
    return cfg


def _seed(cfg: ExperimentConfig) -> int:
    return cfg.run.seeds[0] if cfg.run.seeds else 0


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, default=float))


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.command == "sweep" and (cfg.sweep is None or not cfg.sweep.values):
        raise ConfigError("sweep needs a [sweep] section with values")
    if args.command == "train" and cfg.sweep is not None and cfg.sweep.values:
        print("note: config has a [sweep] section; running every value", file=sys.stderr)
    res = run_experiment(cfg, args.out)
    for run in res.runs:
        last = run.rows[-1]
        print(f"{run.run_id}: welfare={last.social_welfare:.6g} exploitability={last.exploitability:.6g} ne_gap={last.ne_gap:.6g}")
    print(f"wrote {res.out_dir / 'metrics.csv'}")
    return 0


def cmd_estimate(args) -> int:
    cfg = _config(args)
    game = build_game(cfg.env, cfg.algo.gamma)
    rng = substream(_seed(cfg), "estimator")
    rcfg = cfg.algo.residual_config()
    if cfg.algo.consensus:
        cons = estimate_potential_consensus(game, rcfg, rng, cfg.algo.topology, cfg.algo.consensus_alpha, cfg.algo.consensus_rounds)
        model, report = cons.models[0], cons.report(game)
    else:
        est = estimate_potential(game, rcfg, rng)
        model, report = est.model, est.report(game)
    report["potentiality_check"] = check_potentiality(game, model.value, 1000, args.tol, substream(_seed(cfg), "env")).to_json()
    out = Path(args.out or cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "potential_report.json", report)
    with open(out / "potential.json", "w") as fh:
        json.dump(model.to_dict(), fh)
    _print({"coefficients": report.get("coefficients"), "potentiality_check": report["potentiality_check"]["pass"]})
    return 0


def cmd_check(args) -> int:
    cfg = _config(args)
    game = build_game(cfg.env, cfg.algo.gamma)
    phi = None
    if args.potential:
        with open(args.potential) as fh:
            phi = potential_from_dict(json.load(fh)).value
    rng = substream(_seed(cfg), "env")
    report = {"game": game.name, "potentiality": check_potentiality(game, phi, args.probes, args.tol, rng).to_json()}
    if args.state:
        report["state_transitivity"] = check_state_transitivity(game, phi, args.probes, args.tol, rng).to_json()
    _print(report)
    return 0 if all(r["pass"] for k, r in report.items() if k != "game") else 1


def cmd_exploitability(args) -> int:
    from .learners import ActorSet
    from .metrics import exploitability

    cfg = _config(args)
    game = build_game(cfg.env, cfg.algo.gamma)
    with open(args.actors) as fh:
        actors = ActorSet.from_dict(json.load(fh))
    br = replace(cfg.algo.train_config(cfg.eval.eval_every, cfg.eval.eval_episodes), steps=args.budget or cfg.eval.exploitability_budget)
    res = exploitability(game, actors, br, substream(_seed(cfg), "eval"), eval_episodes=cfg.eval.eval_episodes)
    _print({"delta": res.delta, "gains": res.gains, "stderrs": res.stderrs, "method": res.method})
    return 0


def cmd_oracle(args) -> int:
    cfg = _config(args)
    game = build_game(cfg.env, cfg.algo.gamma)
    if cfg.env.name == "cournot":
        from .envs import best_response_dynamics

        from .tabular import discretize, mpe_certificate, value_iteration

        p = game.meta["params"]
        ne = best_response_dynamics(p)
        grids = [np.linspace(game.agent_low(i)[0], game.agent_high(i)[0], args.grid) for i in range(game.n_agents)]
        mdp = discretize(game, np.zeros((1, game.state_dim)), grids, 1, substream(_seed(cfg), "env"))
        vi = value_iteration(mdp)
        gains, ok = mpe_certificate(mdp, vi.policy)
        _print(
            {
                "game": game.name,
                "best_response_dynamics": ne.tolist(),
                "closed_form": game.analytic_ne.tolist() if game.analytic_ne is not None else None,
                "value_iteration": {"grid": args.grid, "greedy_action": mdp.joint_actions[vi.policy[0]].tolist(), "mpe_certified": ok, "max_deviation_gain": float(gains.max())},
            }
        )
        return 0
    if "net" in game.meta:
        from .envs import flow_equilibrium

        net = game.meta["net"]
        out = {"game": game.name, "paths": [[f"{net.edges[e][0]}->{net.edges[e][1]}" for e in p] for p in net.paths()]}
        for label, mode, te in (("wardrop", "wardrop", False), ("atomic", "atomic", False), ("atomic_time_expanded", "atomic", True)):
            eq = flow_equilibrium(net, mode, te)
            out[label] = {"shares": eq.shares().tolist(), "agent_costs": eq.agent_costs.tolist()}
        _print(out)
        return 0
    print(f"no closed-form oracle for env {cfg.env.name!r}", file=sys.stderr)
    return 2


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="potential-marl", description="Potential-game reductions for continuous multi-agent learning.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="INI or JSON experiment config")
        p.add_argument("--seed", type=int, help="override the config's seeds with one seed")
        if out:
            p.add_argument("--out", help="output directory (default: run.output_dir)")
        return p

    common(sub.add_parser("train", help="train and evaluate every seed")).set_defaults(fn=cmd_train)
    common(sub.add_parser("sweep", help="train over the [sweep] values")).set_defaults(fn=cmd_train)
    p = common(sub.add_parser("estimate-potential", help="fit phi_hat from reward oracles"))
    p.add_argument("--tol", type=float, default=1e-2)
    p.set_defaults(fn=cmd_estimate)
    p = common(sub.add_parser("check-potential", help="unilateral-deviation test"), out=False)
    p.add_argument("--potential", help="phi_hat JSON from estimate-potential (default: analytic)")
    p.add_argument("--probes", type=int, default=1000)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--state", action="store_true", help="also test state transitivity")
    p.set_defaults(fn=cmd_check)
    p = common(sub.add_parser("exploitability", help="best-response gain of saved actors"), out=False)
    p.add_argument("--actors", required=True, help="actors.json checkpoint")
    p.add_argument("--budget", type=int, help="best-response training steps")
    p.set_defaults(fn=cmd_exploitability)
    p = common(sub.add_parser("oracle", help="best-response dynamics, value iteration and flow equilibria"), out=False)
    p.add_argument("--grid", type=int, default=11, help="points per agent for value iteration")
    p.set_defaults(fn=cmd_oracle)
    return ap


def main(argv: list[str] | None = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PotentialEstimationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(json.dumps(exc.diagnostics, default=float), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
