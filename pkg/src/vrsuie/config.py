"""Flat ``key = value`` run configuration with ``#`` comments.

Every key has a typed default; unknown keys and malformed values are
rejected with the offending key named. The canonical resolved text (one
line per key, declaration order) is hashed to tie checkpoints to configs.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .losses import EDGE_EPS, LossWeights
from .mvgl import DEFAULT_RATIOS, KL_EPS
from .net import NetConfig


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass(frozen=True)
class Config:
    # network
    base_channels: int = 32
    enc_depths: tuple = (2, 2, 2)
    bottleneck_depth: int = 2
    dec_depths: tuple = (2, 2, 2)
    mlp_ratio: int = 2
    d_state: int = 8
    groups: int = 4
    reduction: int = 4
    k: int = 1
    window: int = 4
    mixer: str = "both"
    scan_order: str = "value"
    dynamic_conv: bool = True
    cfb: bool = True
    guidance: str = "d"
    ratios: tuple = DEFAULT_RATIOS
    kl_eps: float = KL_EPS
    scan_impl: str = "sequential"
    # objective
    lambda_l1: float = 8.0
    lambda_ssim: float = 1.0
    lambda_edge: float = 4.0
    lambda_mvgl: float = 2e-3
    edge_eps: float = EDGE_EPS
    # optimisation
    iterations: int = 2000
    batch_size: int = 2
    lr: float = 1e-4
    lr_min: float = 1e-6
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    t_start: float = 1.0
    t_end: float = 0.1
    t_half: int = 0  # 0: half of the run
    # data and bookkeeping
    image_size: int = 32
    n_train: int = 8
    n_eval: int = 4
    prior: str = "auto"
    seed: int = 0
    ckpt_every: int = 0  # 0: final checkpoint only
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("iterations", "batch_size", "image_size", "n_train"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1", name)
        for name in ("n_eval", "ckpt_every", "t_half"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0", name)
        if self.image_size % 8:
            raise ConfigError("image_size must be a multiple of 8", "image_size")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64", "dtype")
        if len(self.betas) != 2:
            raise ConfigError("betas needs two values", "betas")
        try:
            self.weights()
            self.net_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # -- derived views --------------------------------------------------------
    def net_config(self) -> NetConfig:
        names = set(NetConfig.field_names())
        return NetConfig(**{f.name: getattr(self, f.name) for f in fields(self) if f.name in names})

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_l1, self.lambda_ssim, self.lambda_edge, self.lambda_mvgl)

    @property
    def half_point(self) -> int:
        return self.t_half if self.t_half > 0 else max(self.iterations // 2, 1)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def resolved(self) -> Config:
        return replace(self, t_half=self.half_point)

    def with_(self, **kw) -> Config:
        return replace(self, **kw)

    # -- text form ------------------------------------------------------------
    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def hash(self) -> str:
        return hashlib.sha256(self.resolved().to_text().encode()).hexdigest()


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_DEFAULTS = {f.name: f.default for f in fields(Config)}


def _parse_scalar(raw: str, like, key: str):
    if isinstance(like, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}", key)
    try:
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(like).__name__}", key) from None
    return raw


def parse_value(key: str, raw: str):
    if key not in _DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}", key)
    like = _DEFAULTS[key]
    raw = raw.strip()
    if isinstance(like, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if not parts:
            raise ConfigError(f"{key}: empty list", key)
        return tuple(_parse_scalar(p, like[0], key) for p in parts)
    return _parse_scalar(raw, like, key)


def parse_text(text: str, base: Config | None = None) -> Config:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = parse_value(key, raw)
    return override(base or Config(), values)


def override(cfg: Config, values: dict) -> Config:
    for key in values:
        if key not in _DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}", key)
    return replace(cfg, **values)


def load_config(path) -> Config:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_text(text)


def prior_sources(cfg: Config, n_stages: int = 7) -> list[str]:
    """Per-stage prior source: ``auto``, ``none`` or a VRST path."""
    parts = [p.strip() for p in cfg.prior.split(",")]
    if len(parts) == 1:
        return parts * n_stages
    if len(parts) != n_stages:
        raise ConfigError(f"prior lists {len(parts)} entries; expected 1 or {n_stages}", "prior")
    return parts
