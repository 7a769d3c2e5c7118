"""Small feed-forward network toolkit on numpy.

Dense layers with relu/sigmoid/softmax/linear outputs, MSE and Gaussian KL
losses, the reparameterization trick, Adam, finite-difference gradient checks
and the ``CNET`` checkpoint format.

Parameters are plain ``dict[str, np.ndarray]`` mappings; gradients use the same
keys and shapes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

ACTIVATIONS = ("linear", "relu", "sigmoid", "softmax")

ParameterSet = dict[str, np.ndarray]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free
    x = np.asarray(x)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def activate(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "linear":
        return pre
    if activation == "relu":
        return relu(pre)
    if activation == "sigmoid":
        return sigmoid(pre)
    if activation == "softmax":
        return softmax(pre)
    raise ValueError(f"unknown activation {activation!r}")


def activation_backward(grad_out: np.ndarray, pre: np.ndarray, out: np.ndarray, activation: str) -> np.ndarray:
    if activation == "linear":
        return grad_out
    if activation == "relu":
        return grad_out * (pre > 0)
    if activation == "sigmoid":
        return grad_out * out * (1 - out)
    if activation == "softmax":
        return out * (grad_out - (grad_out * out).sum(axis=-1, keepdims=True))
    raise ValueError(f"unknown activation {activation!r}")


def dense_forward(w: np.ndarray, b: np.ndarray, x: np.ndarray, activation: str = "linear", name: str = "dense") -> np.ndarray:
    """Affine map ``x @ w + b`` followed by ``activation``."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"layer {name}: expected input width {w.shape[0]}, got {x.shape[-1]}")
    return activate(x @ w + b, activation)


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


class MLP:
    """Chain of dense layers.

    ``sizes`` lists every width from input to output; ``activations`` has one
    entry per layer. Parameters are stored as ``w0, b0, w1, b1, ...``.
    """

    def __init__(
        self,
        sizes: Sequence[int],
        activations: Sequence[str],
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output width")
        if len(activations) != len(sizes) - 1:
            raise ValueError(f"{len(sizes) - 1} layers but {len(activations)} activations")
        for act in activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        if "softmax" in activations[:-1]:
            raise ValueError("softmax is only supported on the output layer")
        self.sizes = tuple(int(s) for s in sizes)
        self.activations = tuple(activations)
        self.params: ParameterSet = {}
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            self.params[f"w{i}"] = glorot_uniform(fan_in, fan_out, rng, dtype)
            self.params[f"b{i}"] = np.zeros(fan_out, dtype=dtype)

    @property
    def n_layers(self) -> int:
        return len(self.activations)

    @property
    def in_width(self) -> int:
        return self.sizes[0]

    @property
    def out_width(self) -> int:
        return self.sizes[-1]

    def __call__(self, x: np.ndarray, params: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
        p = self.params if params is None else params
        h = x
        for i, act in enumerate(self.activations):
            h = dense_forward(p[f"w{i}"], p[f"b{i}"], h, act, name=f"w{i}")
        return h

    def forward(self, x: np.ndarray, params: Mapping[str, np.ndarray] | None = None):
        """Forward pass returning ``(output, cache)`` for :meth:`backward`."""
        p = self.params if params is None else params
        inputs, pres, outs = [], [], []
        h = x
        for i, act in enumerate(self.activations):
            w = p[f"w{i}"]
            if h.shape[-1] != w.shape[0]:
                raise ValueError(f"layer w{i}: expected input width {w.shape[0]}, got {h.shape[-1]}")
            pre = h @ w + p[f"b{i}"]
            out = activate(pre, act)
            inputs.append(h)
            pres.append(pre)
            outs.append(out)
            h = out
        return h, (inputs, pres, outs, p)

    def backward(self, cache, grad_out: np.ndarray, need_input_grad: bool = False, grad_is_pre: bool = False):
        """Backpropagate ``grad_out`` (dL/d output). Returns ``(grads, grad_input)``.

        With ``grad_is_pre`` the gradient is taken to be with respect to the
        final layer's pre-activation, skipping its nonlinearity.
        """
        inputs, pres, outs, p = cache
        grads: ParameterSet = {}
        g = grad_out
        for i in reversed(range(self.n_layers)):
            if not (grad_is_pre and i == self.n_layers - 1):
                g = activation_backward(g, pres[i], outs[i], self.activations[i])
            grads[f"w{i}"] = inputs[i].T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            if i > 0 or need_input_grad:
                g = g @ p[f"w{i}"].T
        return grads, (g if need_input_grad else None)

    def copy(self) -> "MLP":
        other = object.__new__(MLP)
        other.sizes = self.sizes
        other.activations = self.activations
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def astype(self, dtype) -> "MLP":
        other = self.copy()
        other.params = {k: v.astype(dtype) for k, v in other.params.items()}
        return other

    def load(self, params: Mapping[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            if k not in params:
                raise KeyError(f"missing parameter {k!r}")
            if params[k].shape != v.shape:
                raise ValueError(f"parameter {k!r}: shape {params[k].shape} != {v.shape}")
        self.params = {k: np.array(params[k], dtype=self.params[k].dtype) for k in self.params}


# ---------------------------------------------------------------- losses


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient with respect to ``pred``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    n = diff.size
    return float((diff * diff).sum() / n), (2.0 / n) * diff


def gaussian_kl(mu, sigma) -> float:
    """KL(N(mu, sigma^2) || N(0, 1)) summed over elements."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if mu.shape != sigma.shape:
        raise ValueError(f"gaussian_kl: shape mismatch {mu.shape} vs {sigma.shape}")
    if np.any(~(sigma > 0)):
        raise ValueError("gaussian_kl: sigma must be strictly positive")
    var = sigma * sigma
    return float(-0.5 * np.sum(1.0 + np.log(var) - mu * mu - var))


def gaussian_kl_logvar(mu: np.ndarray, logvar: np.ndarray):
    """Per-row KL against N(0, 1) from ``(mu, log sigma^2)``, with gradients.

    Returns ``(kl_per_row, dkl_dmu, dkl_dlogvar)``.
    """
    var = np.exp(logvar)
    kl = -0.5 * (1.0 + logvar - mu * mu - var).sum(axis=-1)
    return kl, mu, 0.5 * (var - 1.0)


def reparameterize(mu, sigma, noise) -> np.ndarray:
    """``z = mu + sigma * noise``; ``sigma`` may be zero for a deterministic encode."""
    mu = np.asarray(mu)
    sigma = np.asarray(sigma)
    noise = np.asarray(noise)
    if not (mu.shape == sigma.shape == noise.shape):
        raise ValueError(f"reparameterize: shapes differ {mu.shape}, {sigma.shape}, {noise.shape}")
    return mu + sigma * noise


def reparameterize_backward(grad_z: np.ndarray, noise: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the loss with respect to ``(mu, sigma)``."""
    return grad_z, grad_z * noise


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(
            self.lr, self.beta1, self.beta2, self.eps, self.step,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
        )


def _check_grads(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
    for k, g in grads.items():
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        if g.shape != params[k].shape:
            raise ValueError(f"gradient {k!r}: shape {g.shape} != parameter shape {params[k].shape}")


def _adam_inplace(params: ParameterSet, grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    _check_grads(params, grads)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    step_size = state.lr / c1
    for k, g in grads.items():
        p = params[k]
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        v = state.v[k]
        tmp = np.multiply(g, 1.0 - b1, dtype=p.dtype)
        m *= b1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v *= b2
        v += tmp
        np.divide(v, c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= step_size
        p -= tmp


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState):
    """Pure Adam update with bias correction; returns ``(new_params, new_state)``."""
    new_params = {k: np.array(v, copy=True) for k, v in params.items()}
    new_state = state.copy()
    _adam_inplace(new_params, grads, new_state)
    return new_params, new_state


class Adam:
    """In-place Adam bound to one parameter dict."""

    def __init__(self, params: ParameterSet, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        _adam_inplace(self.params, grads, self.state)


# ---------------------------------------------------------------- gradient checks


def check_gradients(
    loss_fn: Callable[[ParameterSet], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    grads: Mapping[str, np.ndarray] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` must return ``(scalar_loss, grads)``. ``grads`` overrides
    the analytic gradients (used to verify that the check catches faults).
    """
    if not 1e-5 <= h <= 1e-2:
        raise ValueError(f"step size {h} outside [1e-5, 1e-2]")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    if grads is None:
        _, grads = loss_fn(work)
    worst = 0.0
    for name, p in work.items():
        if name not in grads:
            continue
        g = np.asarray(grads[name], dtype=np.float64)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn(work)[0]
            flat[i] = orig - h
            down = loss_fn(work)[0]
            flat[i] = orig
            fd = (up - down) / (2 * h)
            a = gflat[i]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst


def grad_check(network: MLP, x: np.ndarray, h: float = 1e-5, target: np.ndarray | None = None, seed: int = 0) -> float:
    """Gradient check of ``network`` under an MSE loss at input ``x`` (double precision)."""
    net = network.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if target is None:
        target = np.random.default_rng(seed).uniform(0, 1, size=(x.shape[0], net.out_width))

    def loss_fn(params):
        out, cache = net.forward(x, params)
        loss, g = mse_loss(out, target)
        grads, _ = net.backward(cache, g)
        return loss, grads

    return check_gradients(loss_fn, net.params, h)


# ---------------------------------------------------------------- checkpoints

CNET_MAGIC = b"CNET"
CNET_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named tensors in the ``CNET`` format (float32, little-endian)."""
    chunks = [CNET_MAGIC, struct.pack("<II", CNET_VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointFormatError(f"{path}: truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CNET_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic, not a CNET checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != CNET_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported CNET version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float32).reshape(dims)
        out[name] = arr
    if pos != len(data):
        raise CheckpointFormatError(f"{path}: trailing bytes after last tensor")
    return out


def prefixed(prefix: str, params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v for k, v in params.items()}


def unprefixed(prefix: str, tensors: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    head = prefix + "/"
    return {k[len(head):]: v for k, v in tensors.items() if k.startswith(head)}
