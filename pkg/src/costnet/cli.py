"""Command-line entry point: ``costnet <subcommand> --config PATH [--seed N] [--out DIR]``.

Exit status is 0 on success, 1 when a training gate fails and 2 on usage or
configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .agent import Agent, epsilon_greedy, train_agent
from .config import ConfigError, ExperimentConfig, load_config
from .costmodel import agreement_counts, holdout_pairs
from .mdp import BufferFormatError, load_buffer, save_buffer
from .nn import CheckpointFormatError, load_checkpoint, save_checkpoint
from .pipeline import (
    GateFailure, MetricsParseError, _row, _streams, build_costnet, build_vae, collect, distance_labels,
    fit_costnet, fit_vae, run_pipeline, run_suite, write_rows,
)
from .report import compare_runs, format_comparison, plot

log = logging.getLogger("costnet")

EXIT_OK, EXIT_GATE, EXIT_USAGE = 0, 1, 2
SUBCOMMANDS = ("collect", "train-vae", "train-cost", "train-agent", "run", "suite", "eval", "plot")


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="costnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True

    def common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
        p.add_argument("--config", required=config_required, help="experiment config file")
        p.add_argument("--seed", type=int, default=None, help="run seed (default: first configured seed)")
        p.add_argument("--out", default=None, help="output directory (default: output_dir from the config)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config setting")
        p.add_argument("-v", "--verbose", action="store_true")

    helps = {
        "collect": "fill a replay buffer with random-policy transitions",
        "train-vae": "train the predictive model on a collected buffer",
        "train-cost": "train the distance estimator on a buffer and a trained predictive model",
        "train-agent": "train the DQN agent (shaped if models are configured)",
        "run": "run every phase for one seed",
        "suite": "run every configured seed and aggregate",
        "eval": "evaluate saved models of one seed",
        "plot": "plot aggregate CSVs as an SVG reward curve",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=helps[name])
        common(p, config_required=name != "plot")
        if name == "suite":
            p.add_argument("--baseline", default=None, help="second config to compare against seed by seed")
            p.add_argument("--workers", type=int, default=None, help="parallel processes")
        if name in ("train-vae", "train-cost"):
            p.add_argument("--buffer", default=None, help="buffer file (default: <out>/buffer-s<seed>.cnrb)")
        if name == "plot":
            p.add_argument("csv", nargs="+", help="aggregate CSV files")
            p.add_argument("--label", action="append", default=None, help="series label, once per CSV")
            p.add_argument("--output", default=None, help="SVG file (default: <out>/returns.svg)")
    return parser


def _context(args) -> tuple[ExperimentConfig, int, Path]:
    cfg = load_config(args.config, args.set)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, seed, out


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path} (run the earlier phase first)")
    return path


def _load_buffer(args, out: Path, seed: int):
    return load_buffer(_need(Path(args.buffer) if args.buffer else out / f"buffer-s{seed}.cnrb", "buffer"))


def _load_models(cfg: ExperimentConfig, env, out: Path, seed: int, need_cost: bool = True):
    rngs = _streams(seed)
    vae = build_vae(cfg, env, rngs["vae_init"])
    vae.load_state_dict(load_checkpoint(_need(out / f"vae-s{seed}.cnet", "predictive model checkpoint")))
    cost = None
    if need_cost:
        cost = build_costnet(cfg, rngs["cost_init"])
        cost.load_state_dict(load_checkpoint(_need(out / f"cost-s{seed}.cnet", "cost model checkpoint")))
    return vae, cost


def cmd_collect(args) -> int:
    cfg, seed, out = _context(args)
    rng = _streams(seed)["collect"]
    buffer = collect(cfg.make_env(), cfg.collect_steps, rng, env_seed=seed)
    path = out / f"buffer-s{seed}.cnrb"
    save_buffer(buffer, path)
    print(json.dumps({"buffer": str(path), "transitions": len(buffer), "episodes": len(buffer.episode_ranges())}))
    return EXIT_OK


def cmd_train_vae(args) -> int:
    cfg, seed, out = _context(args)
    env = cfg.make_env()
    buffer = _load_buffer(args, out, seed)
    rngs = _streams(seed)
    model = build_vae(cfg, env, rngs["vae_init"])
    run_id = cfg.run_id(seed)
    rows = []
    res = fit_vae(cfg, env, buffer, model, rngs["vae"],
                  on_eval=lambda r: rows.append(_row(run_id, seed, "vae", loss_vae=r["total"], drift=r["drift"])))
    save_checkpoint(out / f"vae-s{seed}.cnet", model.state_dict())
    write_rows(out / f"{run_id}.vae.csv", rows)
    print(json.dumps({"passed": res.passed, "steps": res.steps, "drift": res.drift, "psi": cfg.psi}))
    return EXIT_OK if res.passed else EXIT_GATE


def cmd_train_cost(args) -> int:
    cfg, seed, out = _context(args)
    env = cfg.make_env()
    buffer = _load_buffer(args, out, seed)
    vae, _ = _load_models(cfg, env, out, seed, need_cost=False)
    rngs = _streams(seed)
    model = build_costnet(cfg, rngs["cost_init"])
    run_id = cfg.run_id(seed)
    rows = []
    res = fit_costnet(cfg, env, buffer, vae, model, rngs["cost"], on_eval=lambda r: rows.append(_row(
        run_id, seed, "costnet", loss_cost0=r["loss0"], loss_cost1=r["loss1"], agreement=r["agreement"])))
    save_checkpoint(out / f"cost-s{seed}.cnet", model.state_dict())
    write_rows(out / f"{run_id}.costnet.csv", rows)
    print(json.dumps({"passed": res.passed, "steps": res.steps, "agreement": res.agreement, "tau": cfg.tau_agree}))
    return EXIT_OK if res.passed else EXIT_GATE


def cmd_train_agent(args) -> int:
    cfg, seed, out = _context(args)
    env = cfg.make_env()
    vae = cost = None
    if cfg.needs_models:
        vae, cost = _load_models(cfg, env, out, seed, need_cost=cfg.agent.shaping_mode != "off")
    rngs = _streams(seed)
    width = cfg.vae.latent_width if cfg.agent.uses_latent else int(np.prod(env.spec.state_dims))
    agent = Agent(width, env.spec.action_count, cfg.agent, rngs["agent_init"])
    run_id = cfg.run_id(seed)
    rows = []
    result = train_agent(env, agent, cfg.total_steps, rngs["agent"], costnet=cost, vae=vae, env_seed=seed,
                         sink=lambda m: rows.append(_row(
                             run_id, seed, "agent", m.timestep, episode=m.episode, episodic_return=m.episodic_return,
                             loss_q=m.loss_q, explore_eps=m.explore_eps)))
    save_checkpoint(out / f"q-s{seed}.cnet", agent.state_dict())
    write_rows(out / f"{run_id}.csv", rows)
    last = [e.episodic_return for e in result.episodes[-10:]]
    print(json.dumps({"episodes": len(result.episodes), "mean_last_10": float(np.mean(last)) if last else None}))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg, seed, out = _context(args)
    res = run_pipeline(cfg, seed, out, save_models=True)
    print(json.dumps(res.summary() | {"csv": str(res.csv_path)}))
    return EXIT_OK if res.status == "ok" else EXIT_GATE


def cmd_suite(args) -> int:
    cfg, _, out = _context(args)
    seeds = cfg.seeds if args.seed is None else (args.seed,)
    cfg.seeds = tuple(seeds)
    report = run_suite(cfg, out / cfg.name, args.workers)
    failed = [r for r in report["runs"] if r["status"] != "ok"]
    if args.baseline:
        base = load_config(args.baseline, args.set)
        base.seeds = cfg.seeds
        base_report = run_suite(base, out / base.name, args.workers)
        failed += [r for r in base_report["runs"] if r["status"] != "ok"]
        from .pipeline import read_rows

        env = cfg.make_env()
        table, summary = compare_runs(
            {r["seed"]: read_rows(r["csv"]) for r in report["runs"]},
            {r["seed"]: read_rows(r["csv"]) for r in base_report["runs"]},
            env.spec.optimal_return, _worst_return(env), cfg.total_steps,
        )
        (out / "comparison.csv").write_text(format_comparison(table, summary), encoding="utf-8")
        print(json.dumps(summary))
    print(json.dumps({"runs": len(report["runs"]), "failed": len(failed), "aggregate": report["aggregate"]}))
    return EXIT_GATE if failed else EXIT_OK


def _worst_return(env) -> float:
    """Return of an episode that spends every step without reaching anything."""
    if env.spec.name == "maze":
        return -float(env.spec.max_episode_steps)
    return 0.0


def cmd_eval(args) -> int:
    cfg, seed, out = _context(args)
    env = cfg.make_env()
    report: dict = {}
    rng = np.random.default_rng(seed + 1_000_003)
    if cfg.needs_models:
        from .vae import drift_metric

        vae, cost = _load_models(cfg, env, out, seed)
        fresh = collect(env, max(cfg.collect_steps // 10, 100), rng, env_seed=seed + 1)
        batch = fresh.gather(fresh.ordered_slots())
        report["drift"] = drift_metric(vae, batch, cfg.vae.horizon)
        states, distances = distance_labels(cfg, env, fresh)
        if len(states) >= 2 and np.unique(distances).size >= 2:
            ia, ib, _ = holdout_pairs(distances, rng)
            z = vae.encode_deterministic(states)
            report["agreement"] = float(agreement_counts(cost, z[ia], z[ib], distances[ia] < distances[ib]).mean())
    q_path = out / f"q-s{seed}.cnet"
    if q_path.exists():
        rngs = _streams(seed)
        vae = _load_models(cfg, env, out, seed, need_cost=False)[0] if cfg.agent.uses_latent else None
        width = cfg.vae.latent_width if cfg.agent.uses_latent else int(np.prod(env.spec.state_dims))
        agent = Agent(width, env.spec.action_count, cfg.agent, rngs["agent_init"])
        agent.load_state_dict(load_checkpoint(q_path))
        obs, total, done = env.reset(seed=seed), 0.0, False
        while not done:
            x = vae.encode_deterministic(obs) if vae is not None else obs.reshape(-1)
            obs, r, done = env.step(epsilon_greedy(agent.q_values(x), 0.0, rng))
            total += r
        report["greedy_return"] = total
        report["optimal_return"] = env.spec.optimal_return
    print(json.dumps(report))
    return EXIT_OK


def cmd_plot(args) -> int:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    if args.label and len(args.label) != len(args.csv):
        raise UsageError("give one --label per CSV")
    for p in args.csv:
        _need(Path(p), "aggregate CSV")
    path = plot(args.csv, args.output or out / "returns.svg", args.label)
    print(json.dumps({"plot": str(path)}))
    return EXIT_OK


COMMANDS = {
    "collect": cmd_collect, "train-vae": cmd_train_vae, "train-cost": cmd_train_cost,
    "train-agent": cmd_train_agent, "run": cmd_run, "suite": cmd_suite, "eval": cmd_eval, "plot": cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, BufferFormatError, CheckpointFormatError, MetricsParseError) as exc:
        print(f"costnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GateFailure as exc:
        print(f"costnet {args.command}: gate failed: {exc}", file=sys.stderr)
        return EXIT_GATE


if __name__ == "__main__":
    sys.exit(main())
