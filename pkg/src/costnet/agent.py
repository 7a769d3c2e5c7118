"""DQN with epsilon-greedy exploration, a target network and distance-shaped targets."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .costmodel import CostModel
from .envs import Env
from .mdp import Batch, ReplayBuffer, Transition
from .nn import MLP, Adam
from .vae import VaeModel

log = logging.getLogger(__name__)

SHAPING_MODES = ("literal", "prose", "off")
INPUT_MODES = ("auto", "latent", "state")


class ShapingConfigError(ValueError):
    """Shaping was requested without the models it needs."""


@dataclass
class AgentConfig:
    gamma: float = 0.95
    lr: float = 0.01
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_fraction: float = 0.1
    target_sync_every: int = 1000
    shaping_mode: str = "prose"
    clamp_delta: float = 0.05
    batch_size: int = 32
    warmup: int = 500
    buffer_capacity: int = 5000
    hidden: tuple[int, ...] = (64,)
    q_input: str = "auto"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 < self.clamp_delta < 0.5:
            raise ValueError("clamp_delta must lie in (0, 0.5)")
        if self.shaping_mode not in SHAPING_MODES:
            raise ValueError(f"shaping_mode must be one of {SHAPING_MODES}")
        if self.q_input not in INPUT_MODES:
            raise ValueError(f"q_input must be one of {INPUT_MODES}")
        if not (0.0 <= self.eps_end <= 1.0 and 0.0 <= self.eps_start <= 1.0):
            raise ValueError("exploration rates must lie in [0, 1]")
        if self.lr <= 0 or self.batch_size < 1 or self.target_sync_every < 1 or self.buffer_capacity < 1:
            raise ValueError("lr, batch_size, target_sync_every and buffer_capacity must be positive")
        if self.warmup < 0:
            raise ValueError("warmup must be non-negative")

    @property
    def uses_latent(self) -> bool:
        if self.q_input == "auto":
            return self.shaping_mode != "off"
        return self.q_input == "latent"


def epsilon_greedy(q_values, explore_eps: float, rng: np.random.Generator) -> int:
    """Uniform random action with probability ``explore_eps``, else the first argmax."""
    q = np.asarray(q_values).reshape(-1)
    if q.size == 0:
        raise ValueError("q_values is empty")
    if not 0.0 <= explore_eps <= 1.0:
        raise ValueError("explore_eps must lie in [0, 1]")
    if rng.random() < explore_eps:
        return int(rng.integers(q.size))
    return int(np.argmax(q))


def explore_rate(step: int, total_steps: int, config: AgentConfig) -> float:
    """Linear decay from ``eps_start`` to ``eps_end`` over the first fraction of training."""
    span = config.eps_decay_fraction * total_steps
    if span <= 0:
        return config.eps_end
    frac = min(1.0, step / span)
    return config.eps_start + frac * (config.eps_end - config.eps_start)


def shaped_target(r, c, max_q_next, gamma: float, done, mode: str = "prose", clamp_delta: float = 0.05):
    """Bootstrapped Q target with the reward scaled by the predicted distance ``c``.

    ``literal`` divides by ``1 - min(c, 1 - clamp_delta)``, ``prose`` multiplies
    by ``1 - c`` and ``off`` leaves the reward alone. The bootstrap term is
    dropped on terminal transitions. Works on scalars or arrays.
    """
    r = np.asarray(r, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if mode != "off" and (np.any(c < 0.0) or np.any(c > 1.0) or np.any(np.isnan(c))):
        raise ValueError("distance c must lie in [0, 1]")
    if mode == "literal":
        reward = r / (1.0 - np.minimum(c, 1.0 - clamp_delta))
    elif mode == "prose":
        reward = r * (1.0 - c)
    elif mode == "off":
        reward = r
    else:
        raise ValueError(f"unknown shaping mode {mode!r}")
    bootstrap = np.where(np.asarray(done, dtype=bool), 0.0, gamma * np.asarray(max_q_next, dtype=np.float64))
    y = reward + bootstrap
    return float(y) if y.ndim == 0 else y


class Agent:
    """Online and target Q-networks plus their optimizer."""

    def __init__(self, input_width: int, action_count: int, config: AgentConfig, rng: np.random.Generator):
        self.config = config
        self.action_count = int(action_count)
        sizes = [int(input_width), *config.hidden, self.action_count]
        self.online = MLP(sizes, ["relu"] * len(config.hidden) + ["linear"], rng)
        self.target = self.online.copy()
        self.optimizer = Adam(self.online.params, lr=config.lr)
        self.updates = 0

    def q_values(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        return self.online(x.reshape(1, -1))[0] if x.ndim == 1 else self.online(x)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"q/online/{k}": v for k, v in self.online.params.items()}
        out.update({f"q/target/{k}": v for k, v in self.target.params.items()})
        return out

    def load_state_dict(self, tensors) -> None:
        for net, prefix in ((self.online, "q/online/"), (self.target, "q/target/")):
            for k, v in net.params.items():
                src = tensors[prefix + k]
                if src.shape != v.shape:
                    raise ValueError(f"{prefix}{k}: shape {src.shape} != {v.shape}")
                v[...] = src


def sync_target(agent: Agent) -> None:
    for k, v in agent.online.params.items():
        agent.target.params[k][...] = v


def distance_of(next_states, costnet: CostModel | None, vae: VaeModel | None, latent_input: bool) -> np.ndarray:
    """Predicted distance of each next state; ``next_states`` are Q inputs."""
    if costnet is None:
        raise ShapingConfigError("shaping needs a trained cost model")
    if latent_input:
        z = next_states
    else:
        if vae is None:
            raise ShapingConfigError("shaping on raw states needs a predictive model to embed them")
        z = vae.encode_deterministic(np.asarray(next_states).reshape(len(next_states), *vae.state_dims))
    return np.asarray(costnet.distance_forward(z), dtype=np.float64).reshape(-1)


def dqn_loss(agent: Agent, params, states, actions, y):
    """MSE between ``Q(s, a)`` and fixed targets ``y``; returns ``(loss, grads)``."""
    q, cache = agent.online.forward(np.asarray(states, dtype=np.float32), params)
    n = len(q)
    rows = np.arange(n)
    diff = q[rows, actions] - y
    g = np.zeros_like(q)
    g[rows, actions] = (2.0 / n) * diff
    grads, _ = agent.online.backward(cache, g)
    return float(np.mean(diff.astype(np.float64) ** 2)), grads


def dqn_update(
    agent: Agent,
    batch: Batch,
    costnet: CostModel | None = None,
    vae: VaeModel | None = None,
    cost: np.ndarray | None = None,
) -> float:
    """One optimizer step on the (optionally shaped) TD error.

    ``batch.states``/``next_states`` are Q-network inputs. ``cost`` supplies
    precomputed distances of the next states; otherwise they come from
    ``costnet`` when shaping is on.
    """
    cfg = agent.config
    n = len(batch.states)
    if n == 0:
        raise ValueError("empty batch")
    if cfg.shaping_mode == "off":
        c = np.zeros(n)
    elif cost is not None:
        c = np.asarray(cost, dtype=np.float64)
    else:
        c = distance_of(batch.next_states, costnet, vae, cfg.uses_latent)
    max_q_next = agent.target(np.asarray(batch.next_states, dtype=np.float32)).max(axis=1)
    y = shaped_target(batch.rewards, c, max_q_next, cfg.gamma, batch.dones, cfg.shaping_mode, cfg.clamp_delta)
    y = np.asarray(y, dtype=np.float32)
    loss, grads = dqn_loss(agent, agent.online.params, batch.states, np.asarray(batch.actions), y)
    agent.optimizer.step(grads)
    agent.updates += 1
    return loss


@dataclass
class EpisodeMetrics:
    timestep: int
    episode: int
    episodic_return: float
    loss_q: float | None
    explore_eps: float


@dataclass
class AgentRunResult:
    episodes: list[EpisodeMetrics] = field(default_factory=list)
    steps: int = 0


def train_agent(
    env: Env,
    agent: Agent,
    steps: int,
    rng: np.random.Generator,
    costnet: CostModel | None = None,
    vae: VaeModel | None = None,
    sink: Callable[[EpisodeMetrics], None] | None = None,
    env_seed: int | None = None,
) -> AgentRunResult:
    """Run ``steps`` environment steps, updating after warmup and syncing the target on schedule.

    One :class:`EpisodeMetrics` is emitted per finished episode. Q inputs and
    next-state distances are computed once per transition, as both models
    stay frozen during agent training.
    """
    cfg = agent.config
    shaping = cfg.shaping_mode != "off"
    latent = cfg.uses_latent
    if (shaping or latent) and vae is None:
        raise ShapingConfigError("latent Q input or shaping needs a predictive model")
    if shaping and costnet is None:
        raise ShapingConfigError("shaping needs a trained cost model")

    def featurize(obs: np.ndarray) -> np.ndarray:
        if latent:
            return np.asarray(vae.encode_deterministic(obs), dtype=np.float32)
        return np.asarray(obs, dtype=np.float32).reshape(-1)

    result = AgentRunResult()
    if steps <= 0:
        return result
    buffer = ReplayBuffer(cfg.buffer_capacity, env.spec.action_count)
    costs = np.zeros(cfg.buffer_capacity)
    cache: dict[bytes, tuple[np.ndarray, float]] = {}

    def encode(obs: np.ndarray) -> tuple[np.ndarray, float]:
        key = obs.tobytes()
        hit = cache.get(key)
        if hit is None:
            x = featurize(obs)
            c = float(distance_of(x[None], costnet, vae, latent)[0]) if shaping else 0.0
            hit = (x, c)
            if len(cache) < 100_000:
                cache[key] = hit
        return hit

    obs = env.reset(seed=env_seed)
    x, _ = encode(obs)
    ep_return, ep_losses, episode = 0.0, [], 0
    for t in range(1, steps + 1):
        eps = explore_rate(t - 1, steps, cfg)
        action = epsilon_greedy(agent.q_values(x), eps, rng)
        next_obs, reward, done = env.step(action)
        next_x, next_c = encode(next_obs)
        costs[buffer.next_slot] = next_c
        buffer.push(Transition(x, action, reward, next_x, done))
        ep_return += reward

        if len(buffer) >= max(cfg.warmup, 1) and len(buffer) >= cfg.batch_size:
            slots = buffer.sample_indices(cfg.batch_size, rng)
            ep_losses.append(dqn_update(agent, buffer.gather(slots), costnet, vae, cost=costs[slots]))
        if t % cfg.target_sync_every == 0:
            sync_target(agent)

        if done:
            episode += 1
            row = EpisodeMetrics(t, episode, ep_return, float(np.mean(ep_losses)) if ep_losses else None, eps)
            result.episodes.append(row)
            if sink is not None:
                sink(row)
            obs = env.reset()
            x, _ = encode(obs)
            ep_return, ep_losses = 0.0, []
        else:
            x = next_x
    result.steps = steps
    return result


def steps_to_threshold(
    episodes: Sequence[EpisodeMetrics],
    optimal_return: float,
    worst_return: float,
    fraction: float = 0.95,
    window: int = 5,
) -> int | None:
    """First timestep at which the moving-average return reaches ``fraction`` of optimal.

    Returns are normalised so ``worst_return`` maps to 0 and ``optimal_return``
    to 1, which keeps the threshold meaningful for negative returns.
    """
    if optimal_return <= worst_return:
        raise ValueError("optimal_return must exceed worst_return")
    returns = np.array([e.episodic_return for e in episodes], dtype=np.float64)
    if len(returns) < window:
        return None
    norm = (returns - worst_return) / (optimal_return - worst_return)
    avg = np.convolve(norm, np.ones(window) / window, mode="valid")
    hit = np.nonzero(avg >= fraction)[0]
    return None if hit.size == 0 else int(episodes[hit[0] + window - 1].timestep)
