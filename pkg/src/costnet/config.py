"""Experiment configuration: flat ``section.key = value`` files parsed as TOML."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli

from .agent import AgentConfig
from .envs import ENV_NAMES, make_env

ENV_KEYS = {
    "maze": {"size", "max_steps"},
    "goldcollect": {"size", "gold_count", "gold_value", "max_steps"},
    "cartpole": {"max_steps"},
}


class ConfigError(ValueError):
    """Invalid or unreadable experiment configuration."""


@dataclass
class VaeConfig:
    hidden: tuple[int, ...] = (256, 128)
    latent_width: int = 64
    beta_kl: float = 0.001
    warmup_fraction: float = 0.0
    recon_loss: str = "auto"  # bce for sigmoid decoders, mse for linear ones
    lr: float = 0.001
    batch_size: int = 64
    max_steps: int = 50_000
    eval_every: int = 500
    horizon: int = 1
    val_fraction: float = 0.1
    stop_on_pass: bool = True  # false: train all max_steps, gate judged on the final model


@dataclass
class CostConfig:
    hidden: tuple[int, ...] = (128,)
    normalizer: int = 0  # 0: the environment's step cap
    lr: float = 0.001
    batch_size: int = 32
    max_steps: int = 20_000
    eval_every: int = 500
    consecutive: int = 3
    val_fraction: float = 0.2


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    env: str = "maze"
    env_params: dict[str, Any] = field(default_factory=dict)
    seeds: tuple[int, ...] = tuple(range(10))
    total_steps: int = 100_000
    collect_steps: int = 20_000
    psi: float = 0.3
    tau_agree: float = 0.9
    output_dir: str = "runs"
    workers: int = 1
    vae: VaeConfig = field(default_factory=VaeConfig)
    costnet: CostConfig = field(default_factory=CostConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)

    @property
    def needs_models(self) -> bool:
        """Whether the agent uses the predictive model or the cost model."""
        return self.agent.shaping_mode != "off" or self.agent.uses_latent

    def make_env(self):
        return make_env(self.env, **self.env_params)

    def digest(self) -> str:
        """Short stable hash of every setting except seeds and output location."""
        flat = to_flat(self)
        for k in ("seeds", "output_dir", "workers"):
            flat.pop(k, None)
        return hashlib.sha256(json.dumps(flat, sort_keys=True).encode()).hexdigest()[:10]

    def run_id(self, seed: int) -> str:
        return f"{self.name}-{self.digest()}-s{seed}"


_SECTIONS = {"vae": VaeConfig, "costnet": CostConfig, "agent": AgentConfig}
_TOP = {f.name for f in dataclasses.fields(ExperimentConfig)} - set(_SECTIONS) - {"env_params"}


def _flatten(tree: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(name: str, value, default):
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise TypeError
            return tuple(int(v) for v in value)
        if isinstance(default, int):
            if isinstance(value, bool) or not float(value).is_integer():
                raise TypeError
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(default, str):
            if not isinstance(value, str):
                raise TypeError
            return value
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected {type(default).__name__}, got {value!r}") from None
    return value


def _build(cls, values: dict[str, Any], section: str):
    defaults = cls()
    kwargs = {}
    for key, value in values.items():
        if not hasattr(defaults, key) or key not in {f.name for f in dataclasses.fields(cls)}:
            raise ConfigError(f"unknown setting {section}.{key}")
        kwargs[key] = _coerce(f"{section}.{key}", value, getattr(defaults, key))
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{section}: {exc}") from None


def config_from_flat(flat: dict[str, Any]) -> ExperimentConfig:
    """Build and validate a config from dotted keys such as ``agent.gamma``."""
    top: dict[str, Any] = {}
    sections: dict[str, dict[str, Any]] = {s: {} for s in _SECTIONS}
    env_params: dict[str, Any] = {}
    for key, value in flat.items():
        head, _, rest = key.partition(".")
        if head in _SECTIONS and rest:
            sections[head][rest] = value
        elif head == "env" and rest:
            if rest == "name":
                top["env"] = value
            else:
                env_params[rest] = value
        elif key in _TOP:
            top[key] = value
        else:
            raise ConfigError(f"unknown setting {key}")

    defaults = ExperimentConfig()
    kwargs = {k: _coerce(k, v, getattr(defaults, k)) for k, v in top.items()}
    cfg = ExperimentConfig(
        **kwargs,
        env_params=env_params,
        **{name: _build(cls, sections[name], name) for name, cls in _SECTIONS.items()},
    )
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if cfg.env not in ENV_NAMES:
        raise ConfigError(f"env.name must be one of {ENV_NAMES}, got {cfg.env!r}")
    unknown = set(cfg.env_params) - ENV_KEYS[cfg.env]
    if unknown:
        raise ConfigError(f"unknown setting(s) for {cfg.env}: {', '.join('env.' + k for k in sorted(unknown))}")
    if not cfg.seeds:
        raise ConfigError("seeds must be non-empty")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConfigError("seeds must be distinct")
    if cfg.total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    if cfg.psi <= 0:
        raise ConfigError("psi must be positive")
    if not 0 < cfg.tau_agree <= 1:
        raise ConfigError("tau_agree must lie in (0, 1]")
    if cfg.needs_models and cfg.collect_steps <= 0:
        raise ConfigError("collect_steps must be positive: the replay buffer would be empty")
    if cfg.collect_steps < 0:
        raise ConfigError("collect_steps must be non-negative")
    if cfg.workers < 1:
        raise ConfigError("workers must be at least 1")
    if cfg.vae.recon_loss not in ("auto", "mse", "bce"):
        raise ConfigError("vae.recon_loss must be auto, mse or bce")
    if cfg.vae.latent_width < 1 or cfg.vae.max_steps < 1 or cfg.vae.eval_every < 1 or cfg.vae.batch_size < 1:
        raise ConfigError("vae.latent_width, max_steps, eval_every and batch_size must be positive")
    if not 0 < cfg.vae.val_fraction < 1:
        raise ConfigError("vae.val_fraction must lie in (0, 1)")
    if cfg.costnet.max_steps < 1 or cfg.costnet.eval_every < 1 or cfg.costnet.consecutive < 1:
        raise ConfigError("costnet.max_steps, eval_every and consecutive must be positive")
    if cfg.costnet.normalizer < 0:
        raise ConfigError("costnet.normalizer must be non-negative")
    try:
        cfg.make_env()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"env: {exc}") from None


def parse_config(text: str) -> ExperimentConfig:
    try:
        tree = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config syntax error: {exc}") from None
    return config_from_flat(_flatten(tree))


def load_config(path, overrides: list[str] | None = None) -> ExperimentConfig:
    """Read a config file, apply ``key=value`` overrides and the OUTPUT_DIR variable."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        flat = _flatten(tomli.loads(text))
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        try:
            flat[key.strip()] = tomli.loads(f"v = {raw.strip()}")["v"]
        except tomli.TOMLDecodeError:
            flat[key.strip()] = raw.strip()
    env_out = os.environ.get("OUTPUT_DIR")
    if env_out:
        flat["output_dir"] = env_out
    return config_from_flat(flat)


def to_flat(cfg: ExperimentConfig) -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            for sub in dataclasses.fields(value):
                v = getattr(value, sub.name)
                flat[f"{f.name}.{sub.name}"] = list(v) if isinstance(v, tuple) else v
        elif f.name == "env":
            flat["env.name"] = value
        elif f.name == "env_params":
            flat.update({f"env.{k}": v for k, v in sorted(value.items())})
        else:
            flat[f.name] = list(value) if isinstance(value, tuple) else value
    return flat


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


def dumps(cfg: ExperimentConfig) -> str:
    """Render ``cfg`` as a flat dotted-key file that :func:`parse_config` reads back."""
    return "".join(f"{k} = {_toml_value(v)}\n" for k, v in to_flat(cfg).items())
