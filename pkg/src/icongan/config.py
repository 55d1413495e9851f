"""Run configuration: one dataclass section per module, merged from
defaults, an optional JSON file, and ``section.key=value`` overrides."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class AugmentConfig:
    theme_enabled: bool = True
    app_enabled: bool = True
    flip_prob: float = 0.5
    scale_min: float = 0.8
    scale_max: float = 1.25
    gain_min: float = 0.75
    gain_max: float = 1.25
    bias_max: float = 0.1


@dataclass
class ModelConfig:
    resolution: int = 64
    num_apps: int = 8
    num_themes: int = 12
    z_dim: int = 64
    embed_dim: int = 64
    w_dim: int = 128
    mapping_layers: int = 2
    base_width: int = 64
    max_width: int = 256
    d_base_width: int = 64
    d_max_width: int = 256
    app_feature_dim: int = 128
    patch_feature_dim: int = 128
    grid_side: int = 3
    use_unconditional_head: bool = True


@dataclass
class LossWeights:
    lambda_align: float = 1.0
    lambda_uniform: float = 1.0
    t: float = 2.0
    eps_app: float = 0.25
    eps_theme: float = 0.1
    r1_weight: float = 50.0
    r1_interval: int = 16

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss.{f.name} must be non-negative")
        if self.t <= 0:
            raise ConfigError("loss.t must be positive")
        if self.r1_interval < 1:
            raise ConfigError("loss.r1_interval must be a positive integer")


@dataclass
class TrainConfig:
    batch_size: int = 64
    total_images: int = 200_000
    learning_rate: float = 0.002
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    ema_halflife: float = 10_000.0
    cfd_enabled: bool = True
    dtype: str = "float32"
    checkpoint_every: int = 1000
    sample_every: int = 1000
    log_every: int = 1

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ConfigError("train.batch_size must be >= 2")
        if self.total_images % self.batch_size:
            raise ConfigError("train.total_images must be a multiple of train.batch_size")
        for name in ("learning_rate", "adam_eps", "ema_halflife"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("train.dtype must be float32 or float64")


@dataclass
class EvalConfig:
    acc_icons: int = 2000
    fid_icons: int = 5000
    lpips_conditions: int = 100
    lpips_per_condition: int = 10
    classifier_floor: float = 0.9
    classifier_epochs: int = 200
    holdout_fraction: float = 0.25


EVAL_PRESETS = {
    "desk": dict(acc_icons=2000, fid_icons=5000, lpips_conditions=100, lpips_per_condition=10),
    "paper": dict(acc_icons=20000, fid_icons=50000, lpips_conditions=1000, lpips_per_condition=10),
}


@dataclass
class RunConfig:
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        m = self.model
        if m.resolution < 32 or m.resolution & (m.resolution - 1):
            raise ConfigError("model.resolution must be a power of two >= 32")
        if m.grid_side < 3 or m.grid_side % 2 == 0:
            raise ConfigError("model.grid_side must be odd and >= 3")
        if m.mapping_layers < 2:
            raise ConfigError("model.mapping_layers must be >= 2")
        if m.num_apps < 2 or m.num_themes < 2:
            raise ConfigError("need at least two apps and two themes")
        self.loss.validate()
        self.train.validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        # Training budget and I/O cadence may change across resumes.
        d = self.to_dict()
        for key in ("total_images", "checkpoint_every", "sample_every", "log_every"):
            d["train"].pop(key)
        d.pop("eval")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        cfg = cls()
        merge(cfg, d)
        return cfg


def _coerce(current: Any, value: Any, key: str) -> Any:
    if isinstance(current, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return bool(value)
    try:
        if isinstance(current, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(float(value)) if isinstance(value, str) else int(value)
        if isinstance(current, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r}") from None
    return value


def merge(cfg: RunConfig, d: dict[str, Any], prefix: str = "") -> RunConfig:
    """Merge a nested dict into ``cfg`` in place; unknown keys are errors."""
    for key, value in d.items():
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown config key {prefix}{key}")
        current = getattr(cfg, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{prefix}{key} must be a section")
            merge(current, value, f"{prefix}{key}.")
        else:
            setattr(cfg, key, _coerce(current, value, prefix + key))
    return cfg


def parse_overrides(items: list[str]) -> dict[str, Any]:
    """Turn ``["train.batch_size=32", "seed=3"]`` into a nested dict."""
    out: dict[str, Any] = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        node = out
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value.strip()
    return out


def load_config(path: str | Path | None = None, overrides: list[str] | None = None,
                base: RunConfig | None = None) -> RunConfig:
    cfg = copy.deepcopy(base) if base is not None else RunConfig()
    if path is not None:
        try:
            merge(cfg, json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    if overrides:
        merge(cfg, parse_overrides(overrides))
    return cfg.validate()
