"""Run configuration: one flat dataclass, YAML files, MOTO_* env overrides."""

import dataclasses
import os
from dataclasses import dataclass, field, fields

import yaml

from .errors import ConfigError

# Accepted spellings for fields whose natural name is awkward in Python.
_ALIASES = {"lambda": "lam", "h": "horizon"}


@dataclass
class Config:
    # environment / data
    env_id: str = "push-v0"
    dataset: str = ""
    seed: int = 0

    # return estimation
    gamma: float = 0.99
    lam: float = 0.95
    horizon: int = 10  # imagination steps H

    # conservatism and regularization
    alpha: float = 10.0  # disagreement penalty factor
    beta: float = 10.0  # filtered behavioral cloning factor
    bc_filter: str = "success"  # "success" or "advantage"
    entropy_weight: float = 3e-4

    # world model
    ensemble_size: int = 7  # M dynamics heads
    deter_dim: int = 128
    stoch_slots: int = 8  # C categorical variables
    stoch_classes: int = 8  # K classes per variable
    cnn_depth: int = 16
    mlp_units: int = 128
    embed_dim: int = 256
    kl_balance: float = 0.8

    # optimization
    model_lr: float = 1e-4
    actor_lr: float = 8e-5
    critic_lr: float = 8e-5
    model_batch: int = 16
    agent_batch: int = 128
    seq_len: int = 32  # segment length for model training
    grad_clip: float = 100.0
    target_rho: float = 0.02

    # schedule
    n_offline: int = 10000
    n_online: int = 20000
    updates_per_episode: int = 20  # G
    action_repeat: int = 2
    eval_every_episodes: int = 20
    eval_episodes: int = 10
    checkpoint_interval: int = 1000
    stop_on_success: float = 0.0  # early-stop eval success threshold; 0 disables

    # ablation switches
    no_uncertainty: bool = False
    no_bc: bool = False
    horizon_zero: bool = False

    def validate(self) -> "Config":
        def bad(msg):
            raise ConfigError(f"invalid config: {msg}")

        if not (0.0 < self.gamma <= 1.0):
            bad(f"gamma must be in (0, 1], got {self.gamma}")
        if not (0.0 <= self.lam <= 1.0):
            bad(f"lam must be in [0, 1], got {self.lam}")
        if self.horizon < 1:
            bad(f"horizon must be >= 1, got {self.horizon}")
        if self.alpha < 0:
            bad(f"alpha must be >= 0, got {self.alpha}")
        if self.beta < 0:
            bad(f"beta must be >= 0, got {self.beta}")
        if self.ensemble_size < 2:
            bad(f"ensemble_size must be >= 2, got {self.ensemble_size}")
        if self.bc_filter not in ("success", "advantage"):
            bad(f"bc_filter must be 'success' or 'advantage', got {self.bc_filter!r}")
        if not (0.0 <= self.kl_balance <= 1.0):
            bad(f"kl_balance must be in [0, 1], got {self.kl_balance}")
        if not (0.0 < self.target_rho <= 1.0):
            bad(f"target_rho must be in (0, 1], got {self.target_rho}")
        for name in ("n_offline", "n_online", "updates_per_episode", "action_repeat",
                     "model_batch", "agent_batch", "seq_len", "deter_dim", "stoch_slots",
                     "stoch_classes", "cnn_depth", "mlp_units", "embed_dim",
                     "eval_every_episodes", "eval_episodes", "checkpoint_interval"):
            if getattr(self, name) < (0 if name == "n_online" else 1):
                bad(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("model_lr", "actor_lr", "critic_lr"):
            if getattr(self, name) <= 0:
                bad(f"{name} must be > 0, got {getattr(self, name)}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kwargs) -> "Config":
        return from_dict({**self.to_dict(), **kwargs})


_FIELDS = {f.name: f for f in fields(Config)}


def _coerce(f: dataclasses.Field, value, source: str):
    if f.type == "bool" or isinstance(f.default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
        raise ConfigError(f"{source}: {f.name} expects a boolean, got {value!r}")
    try:
        if isinstance(f.default, int) and not isinstance(f.default, bool):
            out = int(value)
        elif isinstance(f.default, float):
            out = float(value)
        else:
            out = str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{source}: cannot parse {f.name}={value!r}")
    return out


def from_dict(data: dict, source: str = "config") -> Config:
    kwargs = {}
    for key, value in data.items():
        name = _ALIASES.get(str(key).lower(), str(key))
        if name not in _FIELDS:
            raise ConfigError(f"{source}: unknown config key {key!r}")
        kwargs[name] = _coerce(_FIELDS[name], value, source)
    return Config(**kwargs).validate()


def apply_env_overrides(cfg: Config, environ=None) -> Config:
    """Overlay MOTO_<KEY> environment variables onto a config."""
    environ = os.environ if environ is None else environ
    overrides = {}
    for key, value in environ.items():
        if not key.startswith("MOTO_"):
            continue
        name = _ALIASES.get(key[5:].lower(), key[5:].lower())
        if name not in _FIELDS:
            raise ConfigError(f"environment: unknown config key {key}")
        overrides[name] = _coerce(_FIELDS[name], value, "environment")
    if not overrides:
        return cfg
    return cfg.replace(**overrides)


def load(path: str, environ=None) -> Config:
    """Parse a YAML config file (flat key: value mapping) and apply env overrides."""
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML ({e})")
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a key: value mapping")
    return apply_env_overrides(from_dict(data, source=path), environ)


def save(cfg: Config, path: str) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=True)
