"""Run configuration: one YAML/JSON file holding every training, loss, freeze and augment key."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from ..augment import AugmentConfig
from ..core import ConfigError
from ..distill import FreezePolicy, LossConfig


@dataclass
class ModelConfig:
    kind: str = "conv"  # conv | convnext_tiny
    widths: tuple[int, ...] = (16, 16, 32, 32, 64, 64, 64, 64)
    weights: Optional[str] = None  # torchvision weights name for convnext_tiny
    init: Optional[str] = None  # path to a saved ``blocks`` state dict (pretrained backbone)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.kind not in ("conv", "convnext_tiny"):
            raise ConfigError(f"unknown model kind {self.kind!r}")


@dataclass
class TeacherConfig:
    kind: str = "none"  # none | synthetic | torchvision | cache
    embed_dim: int = 32
    seed: int = 1234
    arch: str = "resnet50"
    weights: Optional[str] = None
    fingerprint: Optional[str] = None  # for kind=cache
    spec_path: Optional[str] = None  # synthetic dataset spec.json, for kind=synthetic

    def __post_init__(self):
        if self.kind not in ("none", "synthetic", "torchvision", "cache"):
            raise ConfigError(f"unknown teacher kind {self.kind!r}")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 64
    epochs: int = 10
    optimizer: str = "adamw"
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    freeze: FreezePolicy = field(default_factory=FreezePolicy)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    log_param_digest: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.optimizer.lower() != "adamw":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _build(cls, d, "")


def _build(cls, d: Any, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for k, v in d.items():
        sub = _NESTED.get(k)
        kwargs[k] = _build(sub, v, f"{where}{k}.") if sub is not None and cls is TrainConfig else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from e


_NESTED = {"loss": LossConfig, "freeze": FreezePolicy, "augment": AugmentConfig,
           "model": ModelConfig, "teacher": TeacherConfig}


def load_config(path) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (OSError, json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return TrainConfig.from_dict(data or {})


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(_plain(cfg.to_dict()), sort_keys=True), encoding="utf-8")


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x
