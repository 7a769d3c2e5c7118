"""Seedable maze, gold-collect and cart-pole environments."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .mdp import Transition

# up, down, left, right
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))


class EpisodeFinishedError(RuntimeError):
    """step() called after the episode ended; call reset() first."""


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dims: tuple[int, ...]
    action_count: int
    max_episode_steps: int
    optimal_return: float

    def __post_init__(self):
        if self.action_count < 2:
            raise ValueError("action_count must be at least 2")
        if self.max_episode_steps < 1:
            raise ValueError("max_episode_steps must be positive")


class Env:
    spec: EnvSpec
    # decoder output nonlinearity suited to the observation encoding
    observation_activation = "sigmoid"

    def reset(self, seed: int | None = None) -> np.ndarray:
        raise NotImplementedError

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        raise NotImplementedError

    def is_goal_transition(self, t: Transition) -> bool:
        """Whether ``t`` ends in a goal state."""
        raise NotImplementedError

    def optimal_distance(self, state=None) -> int:
        raise NotImplementedError(f"{self.spec.name}: optimal_distance is only defined for grid environments")

    def _check_action(self, action: int) -> None:
        if self.done:
            raise EpisodeFinishedError(f"{self.spec.name}: episode finished, call reset()")
        if not 0 <= int(action) < self.spec.action_count:
            raise ValueError(f"{self.spec.name}: action {action} outside [0, {self.spec.action_count})")


def _bfs(size: int, start: tuple[int, int], targets: set[tuple[int, int]], walls: frozenset = frozenset()) -> int:
    if start in targets:
        return 0
    seen = {start}
    queue = deque([(start, 0)])
    while queue:
        (r, c), d = queue.popleft()
        for dr, dc in MOVES:
            nxt = (r + dr, c + dc)
            if nxt in seen or nxt in walls or not (0 <= nxt[0] < size and 0 <= nxt[1] < size):
                continue
            if nxt in targets:
                return d + 1
            seen.add(nxt)
            queue.append((nxt, d + 1))
    raise ValueError(f"no target reachable from {start}")


class Maze(Env):
    """Square maze; agent starts at (0, 0) and the goal sits in the opposite corner.

    Observations are ``(size, size, 2)`` one-hot planes: agent, goal. Each step
    costs -1; entering the goal pays +1 and ends the episode.
    """

    def __init__(self, size: int = 11, max_steps: int | None = None, walls=()):
        self.size = int(size)
        self.goal = (self.size - 1, self.size - 1)
        self.start = (0, 0)
        self.walls = frozenset(tuple(w) for w in walls)
        if self.goal in self.walls or self.start in self.walls:
            raise ValueError("start and goal cells cannot be walls")
        cap = int(max_steps) if max_steps else 2 * self.size * self.size
        shortest = _bfs(self.size, self.start, {self.goal}, self.walls)
        self.spec = EnvSpec("maze", (self.size, self.size, 2), 4, cap, float(-(shortest - 1) + 1))
        self.agent = self.start
        self.steps = 0
        self.done = False

    def observation_at(self, pos: tuple[int, int]) -> np.ndarray:
        obs = np.zeros(self.spec.state_dims, dtype=np.float32)
        obs[pos[0], pos[1], 0] = 1.0
        obs[self.goal[0], self.goal[1], 1] = 1.0
        return obs

    def positions(self) -> list[tuple[int, int]]:
        return [(r, c) for r in range(self.size) for c in range(self.size) if (r, c) not in self.walls]

    def reset(self, seed: int | None = None) -> np.ndarray:
        self.agent = self.start
        self.steps = 0
        self.done = False
        return self.observation_at(self.agent)

    def set_agent(self, pos: tuple[int, int]) -> np.ndarray:
        pos = (int(pos[0]), int(pos[1]))
        if pos in self.walls or not (0 <= pos[0] < self.size and 0 <= pos[1] < self.size):
            raise ValueError(f"invalid agent position {pos}")
        self.agent = pos
        self.steps = 0
        self.done = pos == self.goal
        return self.observation_at(pos)

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        self._check_action(action)
        dr, dc = MOVES[int(action)]
        r, c = self.agent[0] + dr, self.agent[1] + dc
        if 0 <= r < self.size and 0 <= c < self.size and (r, c) not in self.walls:
            self.agent = (r, c)
        self.steps += 1
        if self.agent == self.goal:
            self.done = True
            return self.observation_at(self.agent), 1.0, True
        self.done = self.steps >= self.spec.max_episode_steps
        return self.observation_at(self.agent), -1.0, self.done

    @staticmethod
    def agent_position(obs: np.ndarray) -> tuple[int, int]:
        r, c = np.unravel_index(int(np.argmax(obs[..., 0])), obs.shape[:2])
        return int(r), int(c)

    def is_goal_transition(self, t: Transition) -> bool:
        return bool(t.done) and self.agent_position(np.asarray(t.next_state)) == self.goal

    def optimal_distance(self, state=None) -> int:
        """Shortest number of steps from ``state`` (position or observation) to the goal."""
        if state is None:
            pos = self.agent
        elif isinstance(state, np.ndarray) and state.ndim == 3:
            pos = self.agent_position(state)
        else:
            pos = (int(state[0]), int(state[1]))
        return _bfs(self.size, pos, {self.goal}, self.walls)


class GoldCollect(Env):
    """Grid with gold tiles worth ``gold_value`` each; the agent starts in the centre.

    Observations are ``(size, size, 2)`` planes: agent one-hot, remaining gold.
    Entering a gold tile collects it. The episode ends when no gold is left or
    at the step cap.
    """

    def __init__(self, size: int = 10, gold_count: int = 100, gold_value: float = 10.0, max_steps: int = 500):
        self.size = int(size)
        if not 1 <= gold_count <= self.size * self.size:
            raise ValueError(f"gold_count must lie in [1, {self.size * self.size}]")
        self.gold_count = int(gold_count)
        self.gold_value = float(gold_value)
        self.start = (self.size // 2, self.size // 2)
        self.spec = EnvSpec("goldcollect", (self.size, self.size, 2), 4, int(max_steps), self.gold_count * self.gold_value)
        self.rng = np.random.default_rng(0)
        self.agent = self.start
        self.gold: set[tuple[int, int]] = set()
        self.collected = 0.0
        self.steps = 0
        self.done = False

    def observation(self) -> np.ndarray:
        obs = np.zeros(self.spec.state_dims, dtype=np.float32)
        obs[self.agent[0], self.agent[1], 0] = 1.0
        for r, c in self.gold:
            obs[r, c, 1] = 1.0
        return obs

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        cells = self.rng.choice(self.size * self.size, size=self.gold_count, replace=False)
        self.gold = {(int(i) // self.size, int(i) % self.size) for i in cells}
        self.agent = self.start
        self.collected = 0.0
        self.steps = 0
        self.done = False
        return self.observation()

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        self._check_action(action)
        dr, dc = MOVES[int(action)]
        r, c = self.agent[0] + dr, self.agent[1] + dc
        reward = 0.0
        if 0 <= r < self.size and 0 <= c < self.size:
            self.agent = (r, c)
            if self.agent in self.gold:
                self.gold.remove(self.agent)
                reward = self.gold_value
                self.collected += reward
        self.steps += 1
        self.done = not self.gold or self.steps >= self.spec.max_episode_steps
        return self.observation(), reward, self.done

    def is_goal_transition(self, t: Transition) -> bool:
        # every pickup ends a "reach the next gold tile" sub-task
        return t.reward > 0

    def optimal_distance(self, state=None) -> int:
        """Steps to the nearest remaining gold tile (0 when none is left)."""
        if state is None:
            pos, gold = self.agent, set(self.gold)
        else:
            obs = np.asarray(state)
            pos = Maze.agent_position(obs)
            gold = {(int(r), int(c)) for r, c in zip(*np.nonzero(obs[..., 1] > 0.5))}
        if not gold:
            return 0
        gold.discard(pos)
        if not gold:
            return 0
        return _bfs(self.size, pos, gold)


class CartPole(Env):
    """Cart-pole with the classic Euler-integrated dynamics; +1 reward per step."""

    observation_activation = "linear"
    gravity = 9.8
    cart_mass = 1.0
    pole_mass = 0.1
    half_length = 0.5
    force_mag = 10.0
    dt = 0.02
    angle_limit = 12 * 2 * math.pi / 360
    position_limit = 2.4

    def __init__(self, max_steps: int = 500):
        self.spec = EnvSpec("cartpole", (4,), 2, int(max_steps), float(max_steps))
        self.rng = np.random.default_rng(0)
        self.state = np.zeros(4)
        self.steps = 0
        self.done = False

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = self.rng.uniform(-0.05, 0.05, size=4)
        self.steps = 0
        self.done = False
        return self.state.astype(np.float32)

    @classmethod
    def dynamics(cls, state, action: int) -> np.ndarray:
        """One Euler step from ``(x, x_dot, theta, theta_dot)``."""
        x, x_dot, theta, theta_dot = (float(v) for v in state)
        force = cls.force_mag if action == 1 else -cls.force_mag
        total_mass = cls.cart_mass + cls.pole_mass
        pml = cls.pole_mass * cls.half_length
        cos_t, sin_t = math.cos(theta), math.sin(theta)
        temp = (force + pml * theta_dot**2 * sin_t) / total_mass
        theta_acc = (cls.gravity * sin_t - cos_t * temp) / (
            cls.half_length * (4.0 / 3.0 - cls.pole_mass * cos_t**2 / total_mass)
        )
        x_acc = temp - pml * theta_acc * cos_t / total_mass
        return np.array([
            x + cls.dt * x_dot,
            x_dot + cls.dt * x_acc,
            theta + cls.dt * theta_dot,
            theta_dot + cls.dt * theta_acc,
        ])

    def out_of_bounds(self, state) -> bool:
        return abs(state[0]) > self.position_limit or abs(state[2]) > self.angle_limit

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        self._check_action(action)
        self.state = self.dynamics(self.state, int(action))
        self.steps += 1
        self.done = bool(self.out_of_bounds(self.state) or self.steps >= self.spec.max_episode_steps)
        return self.state.astype(np.float32), 1.0, self.done

    def is_goal_transition(self, t: Transition) -> bool:
        # surviving to the step cap is the only success
        return bool(t.done) and not self.out_of_bounds(np.asarray(t.next_state, dtype=np.float64))


ENV_NAMES = ("maze", "goldcollect", "cartpole")


def make_env(name: str, **params) -> Env:
    if name == "maze":
        return Maze(**params)
    if name == "goldcollect":
        return GoldCollect(**params)
    if name == "cartpole":
        return CartPole(**params)
    raise ValueError(f"unknown environment {name!r}; expected one of {ENV_NAMES}")
