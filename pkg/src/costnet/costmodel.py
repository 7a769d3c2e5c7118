"""Two-headed distance estimator over latent states.

``head0`` takes a pair of latents and outputs softmax credences that the first
or the second is closer to the goal. ``head1`` regresses the normalised
distance-to-goal of a single latent through a sigmoid. Training targets come
from walking goal-reaching episodes backwards.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .mdp import Episode, Transition
from .nn import MLP, Adam, mse_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DistanceLabel:
    latent: np.ndarray
    distance: float

    def __post_init__(self):
        if not 0.0 <= self.distance <= 1.0:
            raise ValueError(f"distance label {self.distance} outside [0, 1]")


@dataclass(frozen=True)
class OrdinalPair:
    latent_a: np.ndarray
    latent_b: np.ndarray
    label: tuple[float, float]  # (1, 0) if A is strictly closer, (0, 1) if B is


class CostModel:
    def __init__(self, latent_width: int, rng: np.random.Generator, hidden: Sequence[int] = (128,), dtype=np.float32):
        self.latent_width = int(latent_width)
        hidden = tuple(int(h) for h in hidden)
        self.head0 = MLP([2 * self.latent_width, *hidden, 2], ["relu"] * len(hidden) + ["softmax"], rng, dtype)
        self.head1 = MLP([self.latent_width, *hidden, 1], ["relu"] * len(hidden) + ["sigmoid"], rng, dtype)

    def _latents(self, z) -> tuple[np.ndarray, bool]:
        z = np.asarray(z, dtype=self.head1.params["w0"].dtype)
        single = z.ndim == 1
        z = z.reshape(1, -1) if single else z
        if z.shape[1] != self.latent_width:
            raise ValueError(f"latent width {z.shape[1]} != {self.latent_width}")
        return z, single

    def ordinal_forward(self, z_a, z_b) -> np.ndarray:
        """``[p_A, p_B]``: credence that A (resp. B) is closer to the goal."""
        a, single = self._latents(z_a)
        b, _ = self._latents(z_b)
        if a.shape != b.shape:
            raise ValueError(f"pair shapes differ: {a.shape} vs {b.shape}")
        out = self.head0(np.concatenate([a, b], axis=1))
        return out[0] if single else out

    def distance_forward(self, z) -> np.ndarray | float:
        """Predicted normalised distance-to-goal in (0, 1)."""
        x, single = self._latents(z)
        out = self.head1(x)[:, 0]
        return float(out[0]) if single else out

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"cost/head0/{k}": v for k, v in self.head0.params.items()}
        out.update({f"cost/head1/{k}": v for k, v in self.head1.params.items()})
        return out

    def load_state_dict(self, tensors: Mapping[str, np.ndarray]) -> None:
        self.head0.load({k[len("cost/head0/"):]: v for k, v in tensors.items() if k.startswith("cost/head0/")})
        self.head1.load({k[len("cost/head1/"):]: v for k, v in tensors.items() if k.startswith("cost/head1/")})


# ---------------------------------------------------------------- labels


def backtrack(episode: Episode, normalizer: int) -> tuple[np.ndarray, np.ndarray]:
    """States of a goal-reaching episode and their normalised steps-to-goal.

    Returns ``(states, distances)`` with one row per visited state including
    the terminal goal state (distance 0).
    """
    if not episode.reached_goal:
        raise ValueError("backtracking needs an episode that reached the goal")
    if normalizer < 1:
        raise ValueError("normalizer must be a positive integer")
    ts = episode.transitions
    n = len(ts)
    states = np.stack([np.asarray(t.state) for t in ts] + [np.asarray(ts[-1].next_state)])
    steps = np.arange(n, -1, -1)
    return states, np.minimum(steps, normalizer) / normalizer


def label_distances(
    episode: Episode,
    normalizer: int,
    encode: Callable[[np.ndarray], np.ndarray] | None = None,
) -> list[DistanceLabel]:
    """Walk ``episode`` back from its goal, labelling each state with its distance.

    ``encode`` maps a batch of states to latents; without it the flattened
    state is used.
    """
    states, dist = backtrack(episode, normalizer)
    latents = encode(states) if encode is not None else states.reshape(len(states), -1)
    return [DistanceLabel(np.asarray(z), float(d)) for z, d in zip(latents, dist)]


def goal_episodes(episodes: Iterable[Episode], is_goal: Callable[[Transition], bool]) -> list[Episode]:
    """Cut episodes into goal-reaching segments, each ending at a goal transition.

    Segments that end at an intermediate goal are closed with a terminal copy
    of that transition.
    """
    out = []
    for ep in episodes:
        start = 0
        for i, t in enumerate(ep.transitions):
            if is_goal(t):
                seg = list(ep.transitions[start:i + 1])
                if not seg[-1].done:
                    last = seg[-1]
                    seg[-1] = Transition(last.state, last.action, last.reward, last.next_state, True)
                out.append(Episode(seg, reached_goal=True))
                start = i + 1
    return out


def shortest_labels(episodes: Iterable[Episode], normalizer: int) -> tuple[np.ndarray, np.ndarray]:
    """Backtracked labels merged over identical states, keeping the smallest distance.

    In a deterministic environment every sighting of a state k steps before the
    goal bounds its true distance by k, so the minimum is the tightest label.
    Order of first appearance is preserved.
    """
    best: dict[bytes, int] = {}
    rows: list[np.ndarray] = []
    dists: list[float] = []
    for ep in episodes:
        states, dist = backtrack(ep, normalizer)
        for s, d in zip(states, dist):
            key = np.ascontiguousarray(s, dtype=np.float32).tobytes()
            j = best.get(key)
            if j is None:
                best[key] = len(rows)
                rows.append(np.asarray(s, dtype=np.float32))
                dists.append(float(d))
            elif d < dists[j]:
                dists[j] = float(d)
    if not rows:
        return np.zeros((0,)), np.zeros(0)
    return np.stack(rows), np.array(dists)


def write_labels(path, latents: np.ndarray, distances: np.ndarray) -> None:
    """CSV with columns ``latent_0 .. latent_{W-1}, distance``."""
    latents = np.asarray(latents)
    if len(latents) != len(distances):
        raise ValueError("one distance per latent required")
    header = ",".join([f"latent_{i}" for i in range(latents.shape[1])] + ["distance"])
    np.savetxt(path, np.column_stack([latents, distances]), delimiter=",", header=header, comments="", fmt="%.9g")


def read_labels(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, :-1], data[:, -1]


# ---------------------------------------------------------------- pairs


def sample_pairs(
    distances: np.ndarray,
    n: int,
    rng: np.random.Generator,
    exclude: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` ordered index pairs uniformly among pairs with distinct distances.

    ``exclude`` holds sorted keys ``min(i, j) * len + max(i, j)`` of unordered
    pairs to reject.
    """
    d = np.asarray(distances)
    m = len(d)
    if m < 2 or np.unique(d).size < 2:
        raise ValueError("no pair of labels with distinct distances")
    ia = np.empty(0, dtype=np.int64)
    ib = np.empty(0, dtype=np.int64)
    for _ in range(10_000):
        k = max(2 * (n - len(ia)), 16)
        a = rng.integers(0, m, size=k)
        b = rng.integers(0, m, size=k)
        keep = d[a] != d[b]
        if exclude is not None and len(exclude):
            keys = np.minimum(a, b) * m + np.maximum(a, b)
            keep &= ~np.isin(keys, exclude, assume_unique=False)
        ia = np.concatenate([ia, a[keep]])
        ib = np.concatenate([ib, b[keep]])
        if len(ia) >= n:
            return ia[:n], ib[:n]
    raise ValueError("could not draw enough distinct-distance pairs")


def make_pairs(labels: Sequence[DistanceLabel], n: int, rng: np.random.Generator) -> list[OrdinalPair]:
    """``n`` random distinct-distance pairs, each emitted in both orders (``2n`` total)."""
    d = np.array([lab.distance for lab in labels])
    ia, ib = sample_pairs(d, n, rng)
    out = []
    for i, j in zip(ia, ib):
        a, b = labels[i], labels[j]
        label = (1.0, 0.0) if a.distance < b.distance else (0.0, 1.0)
        out.append(OrdinalPair(a.latent, b.latent, label))
        out.append(OrdinalPair(b.latent, a.latent, (label[1], label[0])))
    return out


def pair_targets(d_a: np.ndarray, d_b: np.ndarray) -> np.ndarray:
    """One-hot ``[1, 0]`` where A is strictly closer, ``[0, 1]`` where B is."""
    closer_a = (np.asarray(d_a) < np.asarray(d_b)).astype(np.float32)
    return np.stack([closer_a, 1.0 - closer_a], axis=1)


# ---------------------------------------------------------------- training


def cost_train_step(model: CostModel, ordinal_batch, distance_batch, opt0: Adam, opt1: Adam) -> tuple[float, float]:
    """One Adam step per head on MSE losses.

    ``ordinal_batch`` is ``(z_a, z_b, targets)`` with one-hot targets;
    ``distance_batch`` is ``(z, distances)``.
    """
    za, zb, target = ordinal_batch
    z, dist = distance_batch
    if len(za) == 0 or len(z) == 0:
        raise ValueError("empty training batch")
    out0, cache0 = model.head0.forward(np.concatenate([za, zb], axis=1))
    loss0, g0 = mse_loss(out0, np.asarray(target, dtype=out0.dtype))
    grads0, _ = model.head0.backward(cache0, g0)
    opt0.step(grads0)

    out1, cache1 = model.head1.forward(z)
    loss1, g1 = mse_loss(out1, np.asarray(dist, dtype=out1.dtype).reshape(-1, 1))
    grads1, _ = model.head1.backward(cache1, g1)
    opt1.step(grads1)
    return loss0, loss1


def agreement_counts(model: CostModel, za: np.ndarray, zb: np.ndarray, truth_a_closer: np.ndarray) -> np.ndarray:
    """Per-pair flag: head0, head1 and ground truth all pick the same state."""
    head0_a = model.ordinal_forward(za, zb)
    head0_a = head0_a[:, 0] > head0_a[:, 1]
    head0_b = ~head0_a
    da = model.distance_forward(za)
    db = model.distance_forward(zb)
    head1_a = da < db
    head1_b = da > db
    truth = np.asarray(truth_a_closer, dtype=bool)
    return np.where(truth, head0_a & head1_a, head0_b & head1_b)


def agreement_rate(model: CostModel, pairs: Sequence[OrdinalPair]) -> float:
    """Fraction of pairs on which both heads and the label agree.

    A tie on head0 counts for B; a tie on head1 is always a disagreement.
    """
    if not pairs:
        raise ValueError("agreement_rate needs a non-empty validation set")
    za = np.stack([p.latent_a for p in pairs])
    zb = np.stack([p.latent_b for p in pairs])
    truth = np.array([p.label[0] > p.label[1] for p in pairs])
    return float(agreement_counts(model, za, zb, truth).mean())


def ordinal_accuracy(model: CostModel, za, zb, truth_a_closer) -> float:
    p = model.ordinal_forward(za, zb)
    return float(((p[:, 0] > p[:, 1]) == np.asarray(truth_a_closer, dtype=bool)).mean())


@dataclass
class CostTrainResult:
    passed: bool
    steps: int
    agreement: float
    history: list[dict] = field(default_factory=list)
    val_pairs: tuple[np.ndarray, np.ndarray] | None = None


def holdout_pairs(distances: np.ndarray, rng: np.random.Generator, fraction: float = 0.2, cap: int = 500):
    """Unordered held-out pairs ``(ia, ib)`` with distinct distances, plus their exclusion keys."""
    d = np.asarray(distances)
    m = len(d)
    _, counts = np.unique(d, return_counts=True)
    distinct_unordered = (m * m - int((counts.astype(np.int64) ** 2).sum())) // 2
    n_val = max(1, min(cap, int(fraction * distinct_unordered)))
    keys: set[int] = set()
    ia, ib = [], []
    while len(ia) < n_val:
        a, b = sample_pairs(d, n_val, rng)
        for i, j in zip(a, b):
            key = int(min(i, j) * m + max(i, j))
            if key in keys:
                continue
            keys.add(key)
            ia.append(int(i))
            ib.append(int(j))
            if len(ia) == n_val:
                break
    return np.array(ia), np.array(ib), np.array(sorted(keys), dtype=np.int64)


def train_costnet(
    model: CostModel,
    latents: np.ndarray,
    distances: np.ndarray,
    rng: np.random.Generator,
    tau: float = 0.9,
    consecutive: int = 3,
    max_steps: int = 20_000,
    eval_every: int = 500,
    batch_size: int = 32,
    lr: float = 0.001,
    val_fraction: float = 0.2,
    val_cap: int = 500,
    on_eval=None,
) -> CostTrainResult:
    """Train both heads until the agreement rate on held-out pairs is ``>= tau``
    for ``consecutive`` evaluations in a row, or ``max_steps`` is reached."""
    latents = np.asarray(latents, dtype=model.head1.params["w0"].dtype)
    distances = np.asarray(distances, dtype=np.float64)
    va, vb, exclude = holdout_pairs(distances, rng, val_fraction, val_cap)
    # both orders of every held-out pair
    za_val = np.concatenate([latents[va], latents[vb]])
    zb_val = np.concatenate([latents[vb], latents[va]])
    truth_val = np.concatenate([distances[va] < distances[vb], distances[vb] < distances[va]])

    opt0 = Adam(model.head0.params, lr=lr)
    opt1 = Adam(model.head1.params, lr=lr)
    history: list[dict] = []
    streak = 0
    agreement = 0.0
    sums = np.zeros(2)
    m = len(distances)
    for step in range(1, max_steps + 1):
        ia, ib = sample_pairs(distances, batch_size, rng, exclude)
        a = np.concatenate([ia, ib])
        b = np.concatenate([ib, ia])
        target = pair_targets(distances[a], distances[b])
        idx = rng.integers(0, m, size=2 * batch_size)
        sums += cost_train_step(
            model,
            (latents[a], latents[b], target),
            (latents[idx], distances[idx]),
            opt0, opt1,
        )
        if step % eval_every == 0:
            agreement = float(agreement_counts(model, za_val, zb_val, truth_val).mean())
            row = {"step": step, "loss0": sums[0] / eval_every, "loss1": sums[1] / eval_every, "agreement": agreement}
            sums[:] = 0
            history.append(row)
            log.debug("costnet step %d agreement %.3f", step, agreement)
            if on_eval is not None:
                on_eval(row)
            streak = streak + 1 if agreement >= tau else 0
            if streak >= consecutive:
                return CostTrainResult(True, step, agreement, history, (va, vb))
    return CostTrainResult(False, max_steps, agreement, history, (va, vb))
