"""Variational one-step predictive model.

The encoder maps a flattened state to ``(mu, log sigma^2)``; the decoder maps a
latent sample concatenated with a one-hot action to the predicted next state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .mdp import Batch, ReplayBuffer, Transition
from .nn import MLP, Adam, gaussian_kl_logvar

log = logging.getLogger(__name__)

LOGVAR_MIN, LOGVAR_MAX = -20.0, 8.0


def one_hot(actions, count: int, dtype=np.float32) -> np.ndarray:
    actions = np.asarray(actions, dtype=np.int64).reshape(-1)
    if actions.size and (actions.min() < 0 or actions.max() >= count):
        raise ValueError(f"action index outside [0, {count})")
    out = np.zeros((actions.size, count), dtype=dtype)
    out[np.arange(actions.size), actions] = 1
    return out


class VaeModel:
    def __init__(
        self,
        state_dims: Sequence[int],
        action_count: int,
        rng: np.random.Generator,
        latent_width: int = 64,
        hidden: Sequence[int] = (256, 128),
        output_activation: str = "sigmoid",
        dtype=np.float32,
    ):
        self.state_dims = tuple(int(d) for d in state_dims)
        self.state_width = int(np.prod(self.state_dims))
        self.action_count = int(action_count)
        self.latent_width = int(latent_width)
        hidden = tuple(int(h) for h in hidden)
        self.encoder = MLP(
            [self.state_width, *hidden, 2 * self.latent_width],
            ["relu"] * len(hidden) + ["linear"], rng, dtype,
        )
        self.decoder = MLP(
            [self.latent_width + self.action_count, *reversed(hidden), self.state_width],
            ["relu"] * len(hidden) + [output_activation], rng, dtype,
        )

    # -- shape helpers

    def _flatten(self, states) -> tuple[np.ndarray, bool]:
        x = np.asarray(states, dtype=self.encoder.params["w0"].dtype)
        single = x.shape == self.state_dims
        if single:
            return x.reshape(1, -1), True
        if x.shape[1:] != self.state_dims and x.shape[-1:] != (self.state_width,):
            raise ValueError(f"state shape {x.shape} does not match model dims {list(self.state_dims)}")
        return x.reshape(len(x), -1), False

    def _split(self, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return h[:, : self.latent_width], np.clip(h[:, self.latent_width:], LOGVAR_MIN, LOGVAR_MAX)

    # -- public API

    def encode(self, states) -> tuple[np.ndarray, np.ndarray]:
        """``(mu, sigma)`` of the approximate posterior."""
        x, single = self._flatten(states)
        mu, logvar = self._split(self.encoder(x))
        sigma = np.exp(0.5 * logvar)
        return (mu[0], sigma[0]) if single else (mu, sigma)

    def encode_deterministic(self, states) -> np.ndarray:
        x, single = self._flatten(states)
        mu = self.encoder(x)[:, : self.latent_width]
        return mu[0] if single else mu

    def decode(self, z, actions) -> np.ndarray:
        z = np.asarray(z, dtype=self.decoder.params["w0"].dtype)
        single = z.ndim == 1
        z2 = z.reshape(1, -1) if single else z
        if z2.shape[1] != self.latent_width:
            raise ValueError(f"latent width {z2.shape[1]} != {self.latent_width}")
        a = one_hot(actions, self.action_count, z2.dtype)
        if len(a) != len(z2):
            raise ValueError("decode needs one action per latent")
        out = self.decoder(np.concatenate([z2, a], axis=1))
        return out.reshape(self.state_dims) if single else out.reshape(len(z2), *self.state_dims)

    def predict_next(self, states, actions) -> np.ndarray:
        """Noise-free one-step prediction ``decode(mu(s), a)``."""
        return self.decode(self.encode_deterministic(states), actions)

    def parameters(self) -> dict[str, np.ndarray]:
        """Live parameter arrays keyed ``encoder/...`` and ``decoder/...``."""
        out = {f"encoder/{k}": v for k, v in self.encoder.params.items()}
        out.update({f"decoder/{k}": v for k, v in self.decoder.params.items()})
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"vae/{k}": v for k, v in self.parameters().items()}

    def load_state_dict(self, tensors: Mapping[str, np.ndarray]) -> None:
        self.encoder.load({k[len("vae/encoder/"):]: v for k, v in tensors.items() if k.startswith("vae/encoder/")})
        self.decoder.load({k[len("vae/decoder/"):]: v for k, v in tensors.items() if k.startswith("vae/decoder/")})


RECON_LOSSES = ("mse", "bce")


def vae_loss(
    model: VaeModel,
    params: Mapping[str, np.ndarray],
    states,
    actions,
    next_states,
    noise,
    beta: float = 1.0,
    recon_loss: str = "mse",
):
    """Loss and gradients for one batch with fixed reparameterization noise.

    Reconstruction is summed over state elements and averaged over the batch:
    squared error for ``mse``, Bernoulli negative log-likelihood for ``bce``
    (sigmoid decoders only). The KL term is averaged over the batch.
    Returns ``(total, recon, kl, grads)`` with grads keyed like ``model.parameters()``.
    """
    enc = {k[8:]: v for k, v in params.items() if k.startswith("encoder/")}
    dec = {k[8:]: v for k, v in params.items() if k.startswith("decoder/")}
    n = len(states)
    x = np.asarray(states).reshape(n, -1)
    target = np.asarray(next_states).reshape(n, -1)

    h, enc_cache = model.encoder.forward(x, enc)
    mu = h[:, : model.latent_width]
    raw_logvar = h[:, model.latent_width:]
    logvar = np.clip(raw_logvar, LOGVAR_MIN, LOGVAR_MAX)
    sigma = np.exp(0.5 * logvar)
    z = mu + sigma * noise
    a = one_hot(actions, model.action_count, z.dtype)
    pred, dec_cache = model.decoder.forward(np.concatenate([z, a], axis=1), dec)

    diff = pred - target
    if recon_loss == "mse":
        recon = float((diff * diff).sum() / n)
        dec_grads, g_in = model.decoder.backward(dec_cache, (2.0 / n) * diff, need_input_grad=True)
    elif recon_loss == "bce":
        if model.decoder.activations[-1] != "sigmoid":
            raise ValueError("bce reconstruction needs a sigmoid decoder output")
        logits = dec_cache[1][-1]
        # softplus(x) - y x, computed without overflow
        nll = np.maximum(logits, 0) - logits * target + np.log1p(np.exp(-np.abs(logits)))
        recon = float(nll.sum(dtype=np.float64) / n)
        dec_grads, g_in = model.decoder.backward(dec_cache, diff / n, need_input_grad=True, grad_is_pre=True)
    else:
        raise ValueError(f"recon_loss must be one of {RECON_LOSSES}")
    kl_rows, dkl_dmu, dkl_dlogvar = gaussian_kl_logvar(mu, logvar)
    kl = float(kl_rows.mean())
    total = recon + beta * kl

    gz = g_in[:, : model.latent_width]
    dmu = gz + (beta / n) * dkl_dmu
    dlogvar = gz * noise * 0.5 * sigma + (beta / n) * dkl_dlogvar
    dlogvar = dlogvar * ((raw_logvar >= LOGVAR_MIN) & (raw_logvar <= LOGVAR_MAX))
    enc_grads, _ = model.encoder.backward(enc_cache, np.concatenate([dmu, dlogvar], axis=1))

    grads = {f"encoder/{k}": v for k, v in enc_grads.items()}
    grads.update({f"decoder/{k}": v for k, v in dec_grads.items()})
    return total, recon, kl, grads


def vae_train_step(
    model: VaeModel,
    batch: Batch,
    optimizer: Adam,
    rng: np.random.Generator,
    beta: float = 1.0,
    recon_loss: str = "mse",
):
    """One Adam step on the negative ELBO. Returns ``(recon, kl, total)``."""
    if len(batch.states) == 0:
        raise ValueError("empty batch")
    noise = rng.standard_normal((len(batch.states), model.latent_width)).astype(np.float32)
    total, recon, kl, grads = vae_loss(
        model, optimizer.params, batch.states, batch.actions, batch.next_states, noise, beta, recon_loss
    )
    optimizer.step(grads)
    return recon, kl, total


def drift_metric(model: VaeModel, data, horizon: int = 1) -> float:
    """Variance-normalised prediction error on held-out transitions.

    ``data`` is a :class:`Batch` or sequence of transitions in time order. The
    squared error of ``horizon``-step predictions is divided by the squared
    deviation of the targets from their per-element mean, so a model that
    always predicts that mean scores 1.0. Windows crossing an episode end are
    skipped.
    """
    batch = _as_batch(data)
    n = len(batch.states)
    if n == 0:
        raise ValueError("drift_metric needs a non-empty validation set")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if horizon == 1:
        pred = model.predict_next(batch.states, batch.actions)
        target = batch.next_states
    else:
        starts = [i for i in range(n - horizon + 1) if not batch.dones[i:i + horizon - 1].any()]
        if not starts:
            raise ValueError(f"no {horizon}-step windows in validation data")
        starts = np.array(starts)
        pred = batch.states[starts]
        for j in range(horizon):
            pred = model.predict_next(pred, batch.actions[starts + j])
        target = batch.next_states[starts + horizon - 1]
    target = np.asarray(target, dtype=np.float64).reshape(len(target), -1)
    pred = np.asarray(pred, dtype=np.float64).reshape(len(target), -1)
    err = float(((pred - target) ** 2).sum())
    spread = float(((target - target.mean(axis=0)) ** 2).sum())
    if spread == 0.0:
        return 0.0 if err == 0.0 else float("inf")
    return err / spread


def _as_batch(data) -> Batch:
    if isinstance(data, Batch):
        return data
    ts: list[Transition] = list(data)
    if not ts:
        return Batch(np.zeros((0, 1)), np.zeros(0, np.int64), np.zeros(0), np.zeros((0, 1)), np.zeros(0, bool))
    return Batch(
        np.stack([np.asarray(t.state, np.float32) for t in ts]),
        np.array([t.action for t in ts], dtype=np.int64),
        np.array([t.reward for t in ts], dtype=np.float32),
        np.stack([np.asarray(t.next_state, np.float32) for t in ts]),
        np.array([t.done for t in ts], dtype=bool),
    )


def split_by_episode(buffer: ReplayBuffer, fraction: float, rng: np.random.Generator) -> tuple[Batch, Batch]:
    """Hold out ``fraction`` of complete episodes (at least one) for validation.

    Transitions outside complete episodes stay in the training split. With fewer
    than two complete episodes the newest ``fraction`` of transitions is held out.
    """
    slots = buffer.ordered_slots()
    ranges = buffer.episode_ranges()
    held = np.zeros(len(slots), dtype=bool)
    if len(ranges) >= 2:
        k = max(1, int(round(fraction * len(ranges))))
        for i in sorted(rng.choice(len(ranges), size=k, replace=False)):
            a, b = ranges[i]
            held[a:b] = True
    else:
        k = max(1, int(round(fraction * len(slots))))
        held[len(slots) - k:] = True
    if held.all():
        raise ValueError("validation split would leave no training data")
    return buffer.gather(slots[~held]), buffer.gather(slots[held])


@dataclass
class VaeTrainResult:
    passed: bool
    steps: int
    drift: float
    history: list[dict] = field(default_factory=list)
    passed_at: int | None = None  # first evaluation step with drift < psi


def train_vae(
    model: VaeModel,
    train: Batch,
    val: Batch,
    rng: np.random.Generator,
    psi: float,
    max_steps: int = 50_000,
    batch_size: int = 64,
    lr: float = 0.001,
    beta: float = 1.0,
    warmup_fraction: float = 0.0,
    eval_every: int = 500,
    horizon: int = 1,
    recon_loss: str = "mse",
    stop_on_pass: bool = True,
    on_eval=None,
) -> VaeTrainResult:
    """Train until ``drift_metric < psi`` on ``val`` or ``max_steps`` optimizer steps.

    With ``stop_on_pass=False`` training runs the full ``max_steps`` and the
    result reports whether the final model is under ``psi`` and when the gate
    was first passed.

    ``warmup_fraction`` > 0 ramps the KL weight linearly from 0 to ``beta`` over
    that fraction of ``max_steps``.
    """
    optimizer = Adam(model.parameters(), lr=lr)
    n = len(train.states)
    history: list[dict] = []
    drift = float("inf")
    warm = int(warmup_fraction * max_steps)
    passed_at = None
    sums = np.zeros(3)
    for step in range(1, max_steps + 1):
        w = beta if warm <= 0 else beta * min(1.0, step / warm)
        idx = rng.integers(0, n, size=batch_size)
        sums += vae_train_step(model, Batch(*(a[idx] for a in train)), optimizer, rng, w, recon_loss)
        if step % eval_every == 0 or step == max_steps:
            drift = drift_metric(model, val, horizon)
            span = eval_every if step % eval_every == 0 else step % eval_every
            row = {"step": step, "recon": sums[0] / span, "kl": sums[1] / span, "total": sums[2] / span, "drift": drift}
            sums[:] = 0
            history.append(row)
            log.debug("vae step %d drift %.4f", step, drift)
            if on_eval is not None:
                on_eval(row)
            if drift < psi:
                if passed_at is None:
                    passed_at = step
                if stop_on_pass:
                    return VaeTrainResult(True, step, drift, history, passed_at)
    return VaeTrainResult(drift < psi, max_steps, drift, history, passed_at)
