"""Transitions, episodes and the experience replay buffer."""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

BUFFER_MAGIC = b"CNRB"
BUFFER_VERSION = 1


class BufferFormatError(ValueError):
    """Raised when a buffer file is malformed, truncated or of the wrong version."""


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool

    def __eq__(self, other) -> bool:
        if not isinstance(other, Transition):
            return NotImplemented
        return (
            self.action == other.action
            and self.reward == other.reward
            and self.done == other.done
            and np.array_equal(self.state, other.state)
            and np.array_equal(self.next_state, other.next_state)
        )


@dataclass
class Episode:
    transitions: list[Transition]
    reached_goal: bool = False

    def __post_init__(self):
        if not self.transitions:
            raise ValueError("an episode needs at least one transition")
        for t in self.transitions[:-1]:
            if t.done:
                raise ValueError("only the final transition of an episode may be terminal")
        if self.reached_goal and not self.transitions[-1].done:
            raise ValueError("an episode that reached the goal must end with done=True")

    def __len__(self) -> int:
        return len(self.transitions)


class Batch(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray


class ReplayBuffer:
    """Fixed-capacity ring of transitions that also indexes complete episodes.

    The state shape is fixed by the first push. Episodes are tracked by
    insertion sequence number; an episode whose first transition has been
    evicted is dropped from the index.
    """

    def __init__(self, capacity: int, action_count: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        if action_count < 1:
            raise ValueError("action_count must be positive")
        self.capacity = int(capacity)
        self.action_count = int(action_count)
        self.dims: tuple[int, ...] | None = None
        self._pushed = 0
        self._episode_start = 0
        self._episodes: deque[tuple[int, int]] = deque()

    def _allocate(self, dims: tuple[int, ...]) -> None:
        self.dims = dims
        self._states = np.zeros((self.capacity, *dims), dtype=np.float32)
        self._next_states = np.zeros((self.capacity, *dims), dtype=np.float32)
        self._actions = np.zeros(self.capacity, dtype=np.int64)
        self._rewards = np.zeros(self.capacity, dtype=np.float32)
        self._dones = np.zeros(self.capacity, dtype=bool)

    def __len__(self) -> int:
        return min(self._pushed, self.capacity)

    @property
    def oldest(self) -> int:
        """Sequence number of the oldest stored transition."""
        return max(0, self._pushed - self.capacity)

    @property
    def next_slot(self) -> int:
        """Storage slot the next push will write to."""
        return self._pushed % self.capacity

    def push(self, t: Transition) -> None:
        state = np.asarray(t.state, dtype=np.float32)
        next_state = np.asarray(t.next_state, dtype=np.float32)
        if self.dims is None:
            if state.ndim == 0 or 0 in state.shape:
                raise ValueError(f"state must have positive dims, got shape {state.shape}")
            self._allocate(state.shape)
        if state.shape != self.dims or next_state.shape != self.dims:
            raise ValueError(
                f"state shape mismatch: buffer holds {list(self.dims)}, "
                f"got state {list(state.shape)} / next_state {list(next_state.shape)}"
            )
        if not (0 <= int(t.action) < self.action_count):
            raise ValueError(f"action {t.action} outside [0, {self.action_count})")
        if not (np.isfinite(state).all() and np.isfinite(next_state).all() and np.isfinite(t.reward)):
            raise ValueError("transition contains non-finite values")

        slot = self._pushed % self.capacity
        self._states[slot] = state
        self._next_states[slot] = next_state
        self._actions[slot] = int(t.action)
        self._rewards[slot] = t.reward
        self._dones[slot] = bool(t.done)
        self._pushed += 1

        oldest = self.oldest
        while self._episodes and self._episodes[0][0] < oldest:
            self._episodes.popleft()
        if t.done:
            if self._episode_start >= oldest:
                self._episodes.append((self._episode_start, self._pushed))
            self._episode_start = self._pushed

    def extend(self, transitions: Iterable[Transition]) -> None:
        for t in transitions:
            self.push(t)

    def _slots(self, seqs: np.ndarray) -> np.ndarray:
        return np.asarray(seqs) % self.capacity

    def _transition(self, slot: int) -> Transition:
        return Transition(
            self._states[slot].copy(),
            int(self._actions[slot]),
            float(self._rewards[slot]),
            self._next_states[slot].copy(),
            bool(self._dones[slot]),
        )

    def _check_sample(self, n: int) -> None:
        if n < 1:
            raise ValueError("sample size must be positive")
        if n > len(self):
            raise ValueError(f"insufficient data: requested {n} transitions, buffer holds {len(self)}")

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform draw with replacement; returns storage slots."""
        self._check_sample(n)
        return self._slots(self.oldest + rng.integers(0, len(self), size=n))

    def sample(self, n: int, rng: np.random.Generator) -> list[Transition]:
        return [self._transition(int(s)) for s in self.sample_indices(n, rng)]

    def sample_batch(self, n: int, rng: np.random.Generator) -> Batch:
        return self.gather(self.sample_indices(n, rng))

    def gather(self, slots: np.ndarray) -> Batch:
        if self.dims is None:
            empty = np.zeros((0,), dtype=np.float32)
            return Batch(empty, np.zeros(0, np.int64), empty, empty, np.zeros(0, bool))
        return Batch(
            self._states[slots],
            self._actions[slots],
            self._rewards[slots],
            self._next_states[slots],
            self._dones[slots],
        )

    def ordered_slots(self) -> np.ndarray:
        return self._slots(np.arange(self.oldest, self._pushed))

    def transitions(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        return [self._transition(int(s)) for s in self.ordered_slots()]

    def episode_ranges(self) -> list[tuple[int, int]]:
        """Complete stored episodes as ``[start, end)`` positions relative to the oldest item."""
        base = self.oldest
        return [(a - base, b - base) for a, b in self._episodes]

    def episodes(self, is_goal=None) -> list[Episode]:
        """Complete stored episodes.

        ``is_goal(transition)`` decides whether the final transition reached a
        goal; without it every episode is marked as not having reached one.
        """
        out = []
        for a, b in self._episodes:
            ts = [self._transition(int(s)) for s in self._slots(np.arange(a, b))]
            out.append(Episode(ts, bool(is_goal(ts[-1])) if is_goal is not None else False))
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, ReplayBuffer):
            return NotImplemented
        if len(self) != len(other) or self.action_count != other.action_count or self.dims != other.dims:
            return False
        if len(self) == 0:
            return True
        a, b = self.gather(self.ordered_slots()), other.gather(other.ordered_slots())
        return all(np.array_equal(x, y) for x, y in zip(a, b)) and self.episode_ranges() == other.episode_ranges()


def _record_dtype(dims: tuple[int, ...]) -> np.dtype:
    size = int(np.prod(dims))
    return np.dtype([
        ("state", "<f4", (size,)),
        ("action", "<u4"),
        ("reward", "<f4"),
        ("next_state", "<f4", (size,)),
        ("done", "u1"),
    ])


def save_buffer(buffer: ReplayBuffer, path) -> None:
    """Write ``buffer`` in the ``CNRB`` layout (little-endian)."""
    dims = buffer.dims or ()
    header = BUFFER_MAGIC + struct.pack("<II", BUFFER_VERSION, len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims)
    header += struct.pack("<IQ", buffer.action_count, len(buffer))
    body = b""
    if len(buffer):
        batch = buffer.gather(buffer.ordered_slots())
        n = len(buffer)
        rec = np.zeros(n, dtype=_record_dtype(dims))
        rec["state"] = batch.states.reshape(n, -1)
        rec["action"] = batch.actions
        rec["reward"] = batch.rewards
        rec["next_state"] = batch.next_states.reshape(n, -1)
        rec["done"] = batch.dones
        body = rec.tobytes()
    Path(path).write_bytes(header + body)


def load_buffer(path, capacity: int | None = None) -> ReplayBuffer:
    """Read a ``CNRB`` file. Capacity defaults to the stored transition count.

    The first stored transition is taken to start an episode.
    """
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != BUFFER_MAGIC:
        raise BufferFormatError(f"{path}: bad magic, not a replay buffer file")
    version, rank = struct.unpack_from("<II", data, 4)
    if version != BUFFER_VERSION:
        raise BufferFormatError(f"{path}: unsupported buffer version {version}")
    pos = 12
    if len(data) < pos + 4 * rank + 12:
        raise BufferFormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", data, pos)
    pos += 4 * rank
    action_count, count = struct.unpack_from("<IQ", data, pos)
    pos += 12
    buf = ReplayBuffer(capacity or max(count, 1), action_count)
    if count == 0:
        if pos != len(data):
            raise BufferFormatError(f"{path}: trailing bytes")
        return buf
    if rank == 0 or 0 in dims:
        raise BufferFormatError(f"{path}: transitions stored without a state shape")
    dt = _record_dtype(dims)
    need = dt.itemsize * count
    if len(data) - pos < need:
        raise BufferFormatError(f"{path}: truncated, expected {count} transitions")
    if len(data) - pos > need:
        raise BufferFormatError(f"{path}: trailing bytes after {count} transitions")
    rec = np.frombuffer(data, dtype=dt, count=count, offset=pos)
    for r in rec:
        buf.push(Transition(
            r["state"].reshape(dims),
            int(r["action"]),
            float(r["reward"]),
            r["next_state"].reshape(dims),
            bool(r["done"]),
        ))
    return buf
