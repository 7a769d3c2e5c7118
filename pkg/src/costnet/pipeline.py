"""Collect, train the predictive model, train the cost model, train the agent."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import Agent, EpisodeMetrics, train_agent
from .config import ExperimentConfig, dumps
from .costmodel import CostModel, CostTrainResult, goal_episodes, shortest_labels, train_costnet
from .envs import Env
from .mdp import ReplayBuffer, Transition
from .nn import save_checkpoint
from .vae import VaeModel, VaeTrainResult, split_by_episode, train_vae

log = logging.getLogger(__name__)

COLUMNS = (
    "run_id", "seed", "phase", "timestep", "episode", "episodic_return",
    "loss_q", "loss_vae", "loss_cost0", "loss_cost1", "agreement", "drift", "explore_eps",
)
INT_COLUMNS = {"seed", "timestep", "episode"}
STR_COLUMNS = {"run_id", "phase"}
PHASES = ("collect", "vae", "costnet", "agent")


class GateFailure(RuntimeError):
    """A training gate was not satisfied within its step cap."""


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("collect", "vae_init", "vae", "cost_init", "cost", "agent_init", "agent")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def collect(env: Env, steps: int, rng: np.random.Generator, env_seed: int | None = None) -> ReplayBuffer:
    """Fill a buffer with ``steps`` transitions from the uniform random policy."""
    if steps <= 0:
        raise ValueError("collect_steps must be positive: the replay buffer would be empty")
    buffer = ReplayBuffer(steps, env.spec.action_count)
    obs = env.reset(seed=env_seed)
    for _ in range(steps):
        action = int(rng.integers(env.spec.action_count))
        nxt, reward, done = env.step(action)
        buffer.push(Transition(obs, action, reward, nxt, done))
        obs = env.reset() if done else nxt
    return buffer


def recon_loss_for(cfg: ExperimentConfig, env: Env) -> str:
    if cfg.vae.recon_loss != "auto":
        return cfg.vae.recon_loss
    return "bce" if env.observation_activation == "sigmoid" else "mse"


def build_vae(cfg: ExperimentConfig, env: Env, rng: np.random.Generator) -> VaeModel:
    return VaeModel(
        env.spec.state_dims, env.spec.action_count, rng,
        latent_width=cfg.vae.latent_width, hidden=cfg.vae.hidden,
        output_activation=env.observation_activation,
    )


def build_costnet(cfg: ExperimentConfig, rng: np.random.Generator) -> CostModel:
    return CostModel(cfg.vae.latent_width, rng, hidden=cfg.costnet.hidden)


def fit_vae(cfg: ExperimentConfig, env: Env, buffer: ReplayBuffer, model: VaeModel, rng, on_eval=None) -> VaeTrainResult:
    train, val = split_by_episode(buffer, cfg.vae.val_fraction, rng)
    v = cfg.vae
    return train_vae(
        model, train, val, rng, cfg.psi,
        max_steps=v.max_steps, batch_size=v.batch_size, lr=v.lr, beta=v.beta_kl,
        warmup_fraction=v.warmup_fraction, eval_every=v.eval_every, horizon=v.horizon,
        recon_loss=recon_loss_for(cfg, env), stop_on_pass=v.stop_on_pass, on_eval=on_eval,
    )


def distance_labels(cfg: ExperimentConfig, env: Env, buffer: ReplayBuffer) -> tuple[np.ndarray, np.ndarray]:
    """Unique states from goal-reaching segments of ``buffer`` with their shortest backtracked distance."""
    normalizer = cfg.costnet.normalizer or env.spec.max_episode_steps
    episodes = goal_episodes(buffer.episodes(), env.is_goal_transition)
    return shortest_labels(episodes, normalizer)


def fit_costnet(cfg: ExperimentConfig, env: Env, buffer: ReplayBuffer, vae: VaeModel, model: CostModel, rng,
                on_eval=None) -> CostTrainResult:
    states, distances = distance_labels(cfg, env, buffer)
    if len(states) < 2 or np.unique(distances).size < 2:
        raise GateFailure("no goal-reaching episodes in the buffer to label distances from")
    latents = vae.encode_deterministic(states)
    c = cfg.costnet
    return train_costnet(
        model, latents, distances, rng, tau=cfg.tau_agree, consecutive=c.consecutive,
        max_steps=c.max_steps, eval_every=c.eval_every, batch_size=c.batch_size, lr=c.lr,
        val_fraction=c.val_fraction, on_eval=on_eval,
    )


@dataclass
class RunResult:
    run_id: str
    seed: int
    status: str = "ok"  # ok | failed-gate
    failed_phase: str | None = None
    rows: list[dict] = field(default_factory=list)
    episodes: list[EpisodeMetrics] = field(default_factory=list)
    csv_path: Path | None = None
    vae: VaeModel | None = None
    costnet: CostModel | None = None
    agent: Agent | None = None

    def summary(self) -> dict:
        return {"run_id": self.run_id, "seed": self.seed, "status": self.status, "failed_phase": self.failed_phase}


def _row(run_id: str, seed: int, phase: str, timestep: int = 0, **values) -> dict:
    row = {k: None for k in COLUMNS}
    row.update(run_id=run_id, seed=seed, phase=phase, timestep=timestep)
    row.update(values)
    return row


def run_pipeline(cfg: ExperimentConfig, seed: int, out_dir=None, save_models: bool = False) -> RunResult:
    """Run every phase for one seed and write ``<run_id>.csv`` (and models) to ``out_dir``.

    A gate that is not met within its cap stops the run; the rows gathered so
    far are still written and the result is marked ``failed-gate``.
    """
    run_id = cfg.run_id(seed)
    res = RunResult(run_id, seed)
    rng = _streams(seed)
    env = cfg.make_env()

    def add(phase: str, timestep: int = 0, **values) -> None:
        res.rows.append(_row(run_id, seed, phase, timestep, **values))

    try:
        if cfg.needs_models:
            log.info("%s: phase collect (%d steps)", run_id, cfg.collect_steps)
            buffer = collect(env, cfg.collect_steps, rng["collect"], env_seed=seed)
            add("collect", episode=len(buffer.episode_ranges()))

            log.info("%s: phase vae", run_id)
            res.vae = build_vae(cfg, env, rng["vae_init"])
            vres = fit_vae(cfg, env, buffer, res.vae, rng["vae"],
                           on_eval=lambda r: add("vae", loss_vae=r["total"], drift=r["drift"]))
            if not vres.passed:
                raise GateFailure(f"vae drift {vres.drift:.4f} never fell below psi={cfg.psi}")
            log.info("%s: vae gate passed at step %d (drift %.4f)", run_id, vres.steps, vres.drift)

            log.info("%s: phase costnet", run_id)
            res.costnet = build_costnet(cfg, rng["cost_init"])
            cres = fit_costnet(cfg, env, buffer, res.vae, res.costnet, rng["cost"], on_eval=lambda r: add(
                "costnet", loss_cost0=r["loss0"], loss_cost1=r["loss1"], agreement=r["agreement"]))
            if not cres.passed:
                raise GateFailure(f"costnet agreement {cres.agreement:.3f} never held at tau={cfg.tau_agree}")
            log.info("%s: costnet gate passed at step %d", run_id, cres.steps)

        log.info("%s: phase agent (%d steps)", run_id, cfg.total_steps)
        width = cfg.vae.latent_width if cfg.agent.uses_latent else int(np.prod(env.spec.state_dims))
        res.agent = Agent(width, env.spec.action_count, cfg.agent, rng["agent_init"])
        result = train_agent(
            env, res.agent, cfg.total_steps, rng["agent"], costnet=res.costnet, vae=res.vae,
            env_seed=seed,
            sink=lambda m: add("agent", m.timestep, episode=m.episode, episodic_return=m.episodic_return,
                               loss_q=m.loss_q, explore_eps=m.explore_eps),
        )
        res.episodes = result.episodes
    except GateFailure as exc:
        res.status = "failed-gate"
        res.failed_phase = "vae" if res.costnet is None else "costnet"
        log.warning("%s: %s", run_id, exc)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        res.csv_path = out / f"{run_id}.csv"
        write_rows(res.csv_path, res.rows)
        (out / f"{run_id}.json").write_text(json.dumps(res.summary(), indent=2) + "\n", encoding="utf-8")
        if save_models:
            save_run_models(res, out)
    return res


def save_run_models(res: RunResult, out: Path) -> None:
    if res.vae is not None:
        save_checkpoint(out / f"vae-s{res.seed}.cnet", res.vae.state_dict())
    if res.costnet is not None:
        save_checkpoint(out / f"cost-s{res.seed}.cnet", res.costnet.state_dict())
    if res.agent is not None:
        save_checkpoint(out / f"q-s{res.seed}.cnet", res.agent.state_dict())


# ---------------------------------------------------------------- CSV


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def format_rows(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in COLUMNS])
    return buf.getvalue()


def write_rows(path, rows) -> None:
    Path(path).write_text(format_rows(rows), encoding="utf-8", newline="")


class MetricsParseError(ValueError):
    pass


def parse_rows(text: str, source: str = "<csv>") -> list[dict]:
    """Parse a metrics CSV, checking the header and every field type."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != COLUMNS:
        raise MetricsParseError(f"{source}: row 1: header does not match the metrics schema")
    rows = []
    for lineno, fields in enumerate(reader, start=2):
        if len(fields) != len(COLUMNS):
            raise MetricsParseError(f"{source}: row {lineno}: expected {len(COLUMNS)} fields, got {len(fields)}")
        row = {}
        for name, raw in zip(COLUMNS, fields):
            try:
                if name in STR_COLUMNS:
                    row[name] = raw
                elif raw == "":
                    row[name] = None
                elif name in INT_COLUMNS:
                    row[name] = int(raw)
                else:
                    row[name] = float(raw)
            except ValueError:
                raise MetricsParseError(f"{source}: row {lineno}: bad value {raw!r} for {name}") from None
        rows.append(row)
    return rows


def read_rows(path) -> list[dict]:
    return parse_rows(Path(path).read_text(encoding="utf-8"), str(path))


# ---------------------------------------------------------------- suites


def _limit_threads() -> None:
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(1)
    except ImportError:  # pragma: no cover
        pass


def _run_one(args) -> dict:
    cfg, seed, out_dir = args
    _limit_threads()
    res = run_pipeline(cfg, seed, out_dir)
    return res.summary() | {"csv": str(res.csv_path)}


def run_suite(cfg: ExperimentConfig, out_dir=None, workers: int | None = None) -> dict:
    """Run every seed, then write ``aggregate.csv`` and ``suite.json`` to ``out_dir``."""
    from .report import aggregate_files, write_aggregate

    out = Path(out_dir or cfg.output_dir)
    runs_dir = out / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(dumps(cfg), encoding="utf-8")
    jobs = [(cfg, s, runs_dir) for s in cfg.seeds]
    workers = workers or cfg.workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(_run_one, jobs))
    else:
        summaries = [_run_one(j) for j in jobs]
    csvs = [s["csv"] for s in summaries]
    write_aggregate(out / "aggregate.csv", aggregate_files(csvs))
    report = {"name": cfg.name, "runs": summaries, "aggregate": str(out / "aggregate.csv")}
    (out / "suite.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return report
