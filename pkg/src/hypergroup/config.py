"""Run configuration: sectioned ``key = value`` files with validated defaults.

Example::

    [env]
    grid = 10
    n_predators = 5

    [learn]
    mode = policy
    episodes = 4000

    [run]
    seed = 3

Unknown sections or keys are errors.  Defaults follow the moderate-scale
predator-prey settings (hidden 96, hypergraph output 64, one layer, 2-4
groups, clustering every 100 steps, stability threshold 0.8, consistency
weight 0.1, attention weight 0.01, learning rate 0.001, batch 500 steps).
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .env import PPConfig
from .spectral import SpectralConfig

MODES = ("policy", "value")
ABLATIONS = ("hgcn", "gcn", "single-group")
OPTIMIZERS = ("auto", "adam", "rmsprop")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    hidden: int = 96
    hgcn_out: int = 64
    hgcn_layers: int = 1
    heads: int = 1
    att_dim: int = 32
    critic_hidden: int = 64
    mixer_embed: int = 32
    leaky_slope: float = 0.2


@dataclass
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 0.01
    beta: float = 0.5
    gamma: float = 0.99
    alpha_critic: float = 0.5
    gae_lambda: float = 0.95


@dataclass
class LearnConfig:
    mode: str = "policy"
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: str = "auto"
    lr: float = 0.001
    episodes: int = 3000
    batch_size: int = 500
    value_batch: int = 32
    n_envs: int = 0
    buffer_size: int = 1000
    target_update: int = 200
    double_q: bool = True
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_anneal: int = 20000
    grad_clip: float = 10.0
    eval_episodes: int = 200
    checkpoint_every: int = 50

    def resolved_optimizer(self) -> str:
        if self.optimizer != "auto":
            return self.optimizer
        return "adam" if self.mode == "policy" else "rmsprop"

    def resolved_envs(self, max_steps: int) -> int:
        if self.n_envs > 0:
            return self.n_envs
        if self.mode == "policy":
            return max(1, -(-self.batch_size // max_steps))
        return 1


@dataclass
class RunConfig:
    env: PPConfig = field(default_factory=PPConfig)
    spectral: SpectralConfig = field(default_factory=SpectralConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    learn: LearnConfig = field(default_factory=LearnConfig)
    ablation: str = "hgcn"
    out_dir: str = "runs/default"
    seed: int = 0

    def validate(self) -> "RunConfig":
        try:
            self.env.validate()
            self.spectral.validate(self.env.n_predators)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        m, lc, w = self.model, self.learn, self.learn.weights
        for name in ("hidden", "hgcn_out", "hgcn_layers", "heads", "att_dim",
                     "critic_hidden", "mixer_embed"):
            if getattr(m, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if lc.mode not in MODES:
            raise ConfigError(f"learn.mode must be one of {MODES}")
        if lc.optimizer not in OPTIMIZERS:
            raise ConfigError(f"learn.optimizer must be one of {OPTIMIZERS}")
        if not 0.0 <= w.gamma < 1.0:
            raise ConfigError("learn.gamma must be in [0,1)")
        for name in ("lambda1", "lambda2", "beta", "alpha_critic"):
            v = getattr(w, name)
            if v != v or abs(v) == float("inf"):
                raise ConfigError(f"learn.{name} must be finite")
        if not 0.0 <= w.gae_lambda <= 1.0:
            raise ConfigError("learn.gae_lambda must be in [0,1]")
        if lc.lr <= 0:
            raise ConfigError("learn.lr must be > 0")
        for name in ("episodes", "batch_size", "value_batch", "buffer_size", "target_update",
                     "eval_episodes", "checkpoint_every"):
            if getattr(lc, name) < 1:
                raise ConfigError(f"learn.{name} must be >= 1")
        if lc.n_envs < 0:
            raise ConfigError("learn.n_envs must be >= 0")
        for name in ("epsilon_start", "epsilon_end"):
            if not 0.0 <= getattr(lc, name) <= 1.0:
                raise ConfigError(f"learn.{name} must be in [0,1]")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"run.ablation must be one of {ABLATIONS}")
        return self


# section -> (target object path, allowed keys)
_SECTIONS = {
    "env": ("env", [f.name for f in dataclasses.fields(PPConfig) if f.name != "seed"]),
    "spectral": ("spectral", [f.name for f in dataclasses.fields(SpectralConfig)
                              if f.name != "seed"]),
    "model": ("model", [f.name for f in dataclasses.fields(ModelConfig)]),
    "learn": ("learn", [f.name for f in dataclasses.fields(LearnConfig) if f.name != "weights"]
              + [f.name for f in dataclasses.fields(LossWeights)]),
    "run": ("", ["ablation", "out_dir", "seed"]),
}


def _coerce(path: str, raw: str, current: Any):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{path}: expected {type(current).__name__}, got {raw!r}") from None
    return raw


def _target(cfg: RunConfig, section: str, key: str):
    if section == "learn" and key in {f.name for f in dataclasses.fields(LossWeights)}:
        return cfg.learn.weights
    attr = _SECTIONS[section][0]
    return getattr(cfg, attr) if attr else cfg


def set_value(cfg: RunConfig, section: str, key: str, raw: str) -> None:
    if section not in _SECTIONS:
        raise ConfigError(f"unknown section [{section}]")
    if key not in _SECTIONS[section][1]:
        raise ConfigError(f"unknown key {section}.{key}")
    obj = _target(cfg, section, key)
    setattr(obj, key, _coerce(f"{section}.{key}", raw, getattr(obj, key)))


def parse_text(text: str, overrides: dict[str, str] | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = RunConfig()
    for section in parser.sections():
        for key, raw in parser.items(section):
            set_value(cfg, section, key, raw)
    for dotted, raw in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        set_value(cfg, section, key, raw)
    cfg.validate()
    _propagate_seed(cfg)
    return cfg


def parse_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Load a config file (or defaults if ``path`` is None) and apply overrides.

    ``overrides`` maps ``section.key`` to raw strings, e.g. ``{"run.seed": "7"}``.
    """
    text = ""
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        text = p.read_text()
    return parse_text(text, overrides)


def _propagate_seed(cfg: RunConfig) -> None:
    cfg.env.seed = cfg.seed
    cfg.spectral.seed = cfg.seed


def to_text(cfg: RunConfig) -> str:
    """Serialize to the same sectioned format (round-trips through parse_text)."""
    lines = []
    for section, (_, keys) in _SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            val = getattr(_target(cfg, section, key), key)
            lines.append(f"{key} = {str(val).lower() if isinstance(val, bool) else val}")
        lines.append("")
    return "\n".join(lines)
