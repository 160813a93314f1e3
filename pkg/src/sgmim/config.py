"""Configuration records and strict dict/JSON conversion."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .encoder import EncoderConfig
from .errors import ConfigurationError
from .model import ModelConfig
from .objective import LossWeights
from .patch_mask import STRATEGIES, SELECTIVE, PatchGrid
from .synthdata import SceneConfig


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 16
    base_lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_steps: int = 300
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 5.0
    mask_ratio: float = 0.6
    loss_weights: LossWeights = field(default_factory=LossWeights)
    masking_strategy: str = SELECTIVE
    seed: int = 0
    data_seed_start: int = 0
    data_pool: int = 0  # 0: stream fresh seeds; n > 0: cycle through n seeds
    dtype: str = "float32"

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigurationError("steps and batch_size must be >= 1")
        if not 0 <= self.warmup_steps < self.steps:
            raise ConfigurationError("warmup_steps must satisfy 0 <= warmup_steps < steps")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigurationError("mask_ratio must lie in (0, 1)")
        if self.masking_strategy not in STRATEGIES:
            raise ConfigurationError(f"masking_strategy must be one of {STRATEGIES}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError("dtype must be float32 or float64")
        if self.data_pool < 0:
            raise ConfigurationError("data_pool must be >= 0")


@dataclass(frozen=True)
class ProbeConfig:
    train_seeds: tuple[int, int] = (1_000_000, 1_000_512)
    val_seeds: tuple[int, int] = (2_000_000, 2_000_256)
    ridge: float = 1e-3
    layer: int = -1  # encoder block whose output is probed; -1 = final normed I_F
    min_depth: float = 1e-3

    def __post_init__(self):
        for lo, hi in (self.train_seeds, self.val_seeds):
            if hi <= lo:
                raise ConfigurationError("seed ranges must be non-empty [start, stop)")
        a, b = self.train_seeds, self.val_seeds
        if a[0] < b[1] and b[0] < a[1]:
            raise ConfigurationError(f"probe train seeds {a} overlap validation seeds {b}")
        if self.ridge < 0:
            raise ConfigurationError("ridge must be >= 0")


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def to_dict(obj) -> dict:
    return dataclasses.asdict(obj)


def from_dict(cls, data: dict, where: str = ""):
    """Build a (possibly nested) frozen dataclass, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where or cls.__name__}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where or cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        tp = hints[k]
        if _is_dataclass_type(tp):
            kwargs[k] = from_dict(tp, v, f"{where}.{k}" if where else k)
        elif typing.get_origin(tp) is tuple:
            kwargs[k] = tuple(v)
        else:
            kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigurationError(str(e)) from None


@dataclass(frozen=True)
class JobSettings:
    """Everything a CLI job can be configured with, as one JSON document."""

    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    sweep_seeds: tuple[int, ...] = (0,)
    analysis_samples: int = 16
    analysis_layer: int = -1  # block index for spectra; -1 = final normed output


def load_settings(path: str | Path | None) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as e:
        raise ConfigurationError(f"cannot read config {path}: {e}") from None


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; values are parsed as JSON when possible."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except ValueError:
            value = raw
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = value
    return data


def build_settings(data: dict) -> JobSettings:
    return from_dict(JobSettings, data)


__all__ = [
    "TrainConfig", "ProbeConfig", "JobSettings", "ModelConfig", "EncoderConfig", "PatchGrid",
    "SceneConfig", "LossWeights", "to_dict", "from_dict", "load_settings", "apply_overrides", "build_settings",
]
