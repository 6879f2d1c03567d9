"""Run configuration: one versioned JSON document per experiment."""

from __future__ import annotations

import hashlib
import json
import os
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import NOISE
from .errors import ConfigError
from .forge import ScenarioGrid
from .victims import ZOO_NAMES

SCHEMA_VERSION = 1


@dataclass
class DataConfig:
    source: str = "synthetic"  # or "idx"
    idx_dir: str | None = None
    num_classes: int = 10
    per_class: int = 200
    test_per_class: int | None = None
    side: int = 16
    noise: float = NOISE

    def validate(self) -> None:
        if self.source not in ("synthetic", "idx"):
            raise ConfigError(f"data.source: expected 'synthetic' or 'idx', got {self.source!r}")
        if self.source == "idx" and not self.idx_dir:
            raise ConfigError("data.idx_dir: required when data.source is 'idx'")


@dataclass
class VictimConfig:
    names: list[str] = field(default_factory=lambda: list(ZOO_NAMES))
    epochs: int = 6
    lr: float = 0.05
    batch_size: int = 32

    def validate(self) -> None:
        bad = [n for n in self.names if n not in ZOO_NAMES]
        if bad:
            raise ConfigError(f"victims.names: unknown architectures {bad}; choose from {list(ZOO_NAMES)}")
        if self.epochs < 1:
            raise ConfigError("victims.epochs: must be >= 1")


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    weight_decay: float = 1e-3
    batch_size: int = 32
    sigma_lr: float | None = None
    width: int = 24
    trunk_depth: str = "large"
    bottleneck: int = 8
    ae_epochs: int = 10
    ae_lr: float = 1e-3
    baseline_epochs: int | None = None  # defaults to ``epochs``

    def validate(self) -> None:
        if self.epochs < 1 or self.ae_epochs < 0:
            raise ConfigError("train.epochs must be >= 1 and train.ae_epochs >= 0")
        if self.lr <= 0 or self.weight_decay < 0 or self.batch_size < 1:
            raise ConfigError("train: lr > 0, weight_decay >= 0 and batch_size >= 1 required")


@dataclass
class RunConfig:
    version: int = SCHEMA_VERSION
    seed: int = 0
    out: str = "runs/default"
    threads: int | None = None
    data: DataConfig = field(default_factory=DataConfig)
    victims: VictimConfig = field(default_factory=VictimConfig)
    grid: ScenarioGrid = field(default_factory=ScenarioGrid)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: dict = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        if self.version != SCHEMA_VERSION:
            raise ConfigError(f"version: schema {self.version} is not supported (expected {SCHEMA_VERSION})")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed: must be an unsigned 64-bit integer")
        self.data.validate()
        self.victims.validate()
        self.train.validate()
        missing = [v for v in self.grid.victims if v not in self.victims.names]
        if missing:
            raise ConfigError(f"grid.victims: {missing} are not trained (add them to victims.names)")
        return self

    @property
    def n_threads(self) -> int:
        return self.threads or os.cpu_count() or 1

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def hash(self) -> str:
        """Digest of everything that affects results (the output path excluded)."""
        d = self.to_json()
        d.pop("out")
        d.pop("threads")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


_SECTIONS = {"data": DataConfig, "victims": VictimConfig, "grid": ScenarioGrid, "train": TrainConfig}


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}: unknown field")
    try:
        return cls(**d)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config: top level must be a JSON object")
    top = {k: v for k, v in d.items() if k not in _SECTIONS}
    unknown = sorted(set(top) - {f.name for f in fields(RunConfig)})
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown field")
    sections = {name: _build(cls, d.get(name, {}), name) for name, cls in _SECTIONS.items()}
    if not isinstance(top.get("ablation", {}), dict):
        raise ConfigError("ablation: expected an object of flag -> value")
    cfg = RunConfig(**top, **sections)
    return cfg.validate()


def load_config(path) -> RunConfig:
    """Parse a JSON config file; errors name the offending line or field."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    try:
        return from_dict(d)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def derive_seed(seed: int, *keys) -> int:
    """Independent 63-bit stream seed for a named sub-task of a run."""
    words = [int(seed) % 2**32, int(seed) // 2**32] + [zlib.crc32(str(k).encode()) for k in keys]
    return int(np.random.SeedSequence(words).generate_state(2, np.uint64)[0] >> np.uint64(1))
