"""Experiment configuration: nested dataclasses stored as YAML.

Every leaf is an int, float, str, bool or a list of ints. Unknown keys are
rejected on load so typos fail loudly. ``version`` is bumped whenever a key
changes meaning.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

CONFIG_VERSION = 1


@dataclass
class ModelConfig:
    kind: str = "mlp"  # mlp | conv | gru
    hidden: list[int] = field(default_factory=lambda: [16, 16])
    activation: str = "relu"
    lift: str = "affine"  # affine | mlp | zeros | reshape (mlp models only)
    lift_hidden: int = 0
    bias: bool = True
    batchnorm: bool = False
    gate: bool = False
    dropout: float = 0.0
    # conv
    stem: int = 8
    blocks: list[int] = field(default_factory=lambda: [8, 16])
    # gru
    embed: int = 8
    seq_len: int = 32


@dataclass
class OptimConfig:
    name: str = "adam"  # adam | sgd
    lr: float = 0.01
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2: float = 0.0
    l2_scale: float = -1.0  # negative: pick per algebra and dataset
    schedule: str = "constant"  # constant | step
    milestones: list[int] = field(default_factory=list)
    gamma: float = 0.1


@dataclass
class DataConfig:
    name: str = "spiral"  # spiral | blobs | cifar10 | text
    samples_per_class: int = 100
    classes: int = 3
    features: int = 2
    noise: float = 0.2
    turns: float = 1.0
    spread: float = 1.0
    path: str = ""
    batch_size: int = 0  # 0 = full batch
    crop: int = 24
    max_records: int = 0  # cifar: 0 = all


@dataclass
class PruneConfig:
    final_sparsity: float = 0.0
    criterion: str = "frobenius"
    interval: int = 100
    start_fraction: float = 0.2
    end_fraction: float = 0.8
    per_layer: bool = False


@dataclass
class ExperimentConfig:
    version: int = CONFIG_VERSION
    name: str = "run"
    algebra: str = "M2R"
    seed: int = 0
    steps: int = 2000
    log_every: int = 100
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return _build(cls, data or {}, "")

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(text))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text())

    def override(self, assignments: list[str]) -> "ExperimentConfig":
        """Apply ``dotted.key=value`` assignments; values are parsed as YAML scalars."""
        data = self.to_dict()
        for item in assignments:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ValueError(f"override {item!r} is not key=value")
            node = data
            parts = key.strip().split(".")
            for part in parts[:-1]:
                if not isinstance(node.get(part), dict):
                    raise KeyError(f"unknown config section {part!r} in {key!r}")
                node = node[part]
            if parts[-1] not in node:
                raise KeyError(f"unknown config key {key!r}")
            node[parts[-1]] = yaml.safe_load(raw)
        return ExperimentConfig.from_dict(data)


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ValueError(f"config section {prefix or '<root>'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise KeyError(f"unknown config keys under {prefix or '<root>'}: {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(value, default, f"{prefix}{name}")
    cfg = cls(**kwargs)
    if cls is ExperimentConfig and cfg.version != CONFIG_VERSION:
        raise ValueError(f"config version {cfg.version} is not supported (expected {CONFIG_VERSION})")
    return cfg


def _coerce(value, default, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise TypeError(f"{key} must be a bool")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"{key} must be an int")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads "1e-3" (no dot) as a string
            try:
                value = float(value)
            except ValueError:
                raise TypeError(f"{key} must be a number") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"{key} must be a number")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise TypeError(f"{key} must be a list")
        return list(value)
    return str(value)
