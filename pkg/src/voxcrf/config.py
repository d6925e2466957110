"""Run configuration: nested dataclasses plus a ``section.key = value`` file format.

Example file::

    # desk run
    run.seed = 3
    run.voxel_size = 0.1
    network.widths = (8, 16, 16, 16)
    stage1.epochs = 50
    gridsearch.candidates = (0.4, 0.8, 1.6)

Values are Python literals (numbers, strings, tuples, booleans); bare words
are taken as strings.
"""
from __future__ import annotations

import ast
from dataclasses import MISSING, dataclass, field, fields, replace
from pathlib import Path

from .augment import AugmentConfig
from .fcnn import FcnnConfig

THETA_ALPHA_RANGE = (0.1, 3.2)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    voxel_size: float = 0.05
    crop_xy: float = 5.0
    max_dims: int = 100
    backend: str = "permutohedral"


@dataclass(frozen=True)
class Stage1Config:
    epochs: int = 200
    lr: float = 1e-3
    lr_decay_every: int = 50
    lr_decay_factor: float = 10.0
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 0 or self.lr < 0:
            raise ConfigError("stage1 epochs and lr must be >= 0")
        if self.lr_decay_every < 1 or self.lr_decay_factor <= 0:
            raise ConfigError("stage1 decay settings must be positive")

    def lr_at(self, epoch):
        return self.lr / self.lr_decay_factor ** (epoch // self.lr_decay_every)


@dataclass(frozen=True)
class Stage2Config:
    enabled: bool = True
    epochs: int = 2
    lr: float = 1e-5
    kernel_lr_mult: float = 1e4    # w_s and w_b
    compat_lr_mult: float = 1e3    # mu
    momentum: float = 0.9
    crf_iters: int = 5
    manual: bool = False           # keep the hand-set CRF, skip stage 2 learning
    clip_norm: float = 0.0         # per-group gradient norm cap, 0 disables

    def __post_init__(self):
        if self.epochs < 0 or self.lr < 0:
            raise ConfigError("stage2 epochs and lr must be >= 0")
        if self.kernel_lr_mult < 0 or self.compat_lr_mult < 0:
            raise ConfigError("stage2 multipliers must be >= 0")
        if self.crf_iters < 1:
            raise ConfigError("stage2 crf_iters must be >= 1")
        if self.clip_norm < 0:
            raise ConfigError("stage2 clip_norm must be >= 0")


@dataclass(frozen=True)
class CrfConfig:
    w_s: float = 3.0
    w_b: float = 5.0
    theta_alpha: float = 0.8
    theta_beta: float = 11.0
    theta_gamma: float = 0.05
    test_iters: int = 10

    def __post_init__(self):
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise ConfigError("CRF bandwidths must be positive")
        if self.test_iters < 1:
            raise ConfigError("crf test_iters must be >= 1")


@dataclass(frozen=True)
class GridSearchConfig:
    candidates: tuple = (0.1, 0.2, 0.4, 0.8, 1.6, 3.2)

    def __post_init__(self):
        check_theta_alpha_candidates(self.candidates)


def check_theta_alpha_candidates(candidates):
    lo, hi = THETA_ALPHA_RANGE
    if len(candidates) == 0:
        raise ConfigError("need at least one theta_alpha candidate")
    for c in candidates:
        if not lo <= c <= hi:
            raise ConfigError(f"theta_alpha candidate {c} outside [{lo}, {hi}] m")


@dataclass(frozen=True)
class TrainConfig:
    run: RunConfig = field(default_factory=RunConfig)
    network: FcnnConfig = field(default_factory=FcnnConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    crf: CrfConfig = field(default_factory=CrfConfig)
    gridsearch: GridSearchConfig = field(default_factory=GridSearchConfig)

    def with_overrides(self, pairs):
        """Apply ``{"section.key": value}`` overrides; values may be strings."""
        sections = {f.name: getattr(self, f.name) for f in fields(self)}
        changes = {}
        for dotted, raw in pairs.items():
            section, _, key = dotted.partition(".")
            if section not in sections or not key:
                raise ConfigError(f"unknown setting {dotted!r}")
            obj = changes.get(section, sections[section])
            names = {f.name: f for f in fields(obj)}
            if key not in names:
                raise ConfigError(f"unknown setting {dotted!r}")
            value = _coerce(parse_value(raw) if isinstance(raw, str) else raw, names[key], dotted)
            try:
                changes[section] = replace(obj, **{key: value})
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{dotted}: {exc}") from None
        return replace(self, **changes)


def parse_value(text):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _coerce(value, f, dotted):
    default = None if f.default is MISSING else f.default
    if isinstance(default, bool):
        if isinstance(value, str) and value.lower() in ("on", "off", "true", "false", "yes", "no"):
            return value.lower() in ("on", "true", "yes")
        if not isinstance(value, bool):
            raise ConfigError(f"{dotted}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, tuple) and isinstance(value, (list, tuple)):
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if isinstance(default, tuple) and isinstance(value, (int, float)):
        return (value,)
    if default is not None and not isinstance(default, tuple) and type(value) is not type(default):
        if not (isinstance(default, float) and isinstance(value, int)):
            raise ConfigError(f"{dotted}: expected {type(default).__name__}, got {value!r}")
    return value


def parse_config_text(text, base=None):
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} lacks a section")
        pairs[key] = value
    return (base or TrainConfig()).with_overrides(pairs)


def load_config(path, overrides=()):
    """Read a config file and apply ``key=value`` override strings."""
    cfg = parse_config_text(Path(path).read_text()) if path else TrainConfig()
    pairs = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v
    return cfg.with_overrides(pairs)


def desk_config(seed=0):
    """Settings for CPU-sized runs on synthetic rooms."""
    return TrainConfig().with_overrides({
        "run.seed": seed,
        "run.voxel_size": 0.1,
        "network.widths": (16, 32, 32, 32),
        "stage1.epochs": 50,
        "stage1.lr_decay_every": 50,
        "stage2.lr": 1e-6,
        "stage2.clip_norm": 10.0,
    })
