"""RunConfig: one JSON document merging every component configuration."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .fusion import FusionConfig
from .model import ModelConfig
from .pooling import PoolingConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = "data"
    train: str = "train.jsonl"
    test: str = "test.jsonl"
    vocab: str = "vocab.txt"

    def path(self, name: str) -> Path:
        return Path(self.root) / getattr(self, name)


SECTIONS = {
    "fusion": FusionConfig,
    "pooling": PoolingConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "data": DataConfig,
}


@dataclass
class RunConfig:
    fusion: FusionConfig = field(default_factory=FusionConfig)
    pooling: PoolingConfig = field(default_factory=PoolingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        parts = {}
        for name, klass in SECTIONS.items():
            sub = d.get(name, {})
            names = {f.name for f in dataclasses.fields(klass)}
            bad = set(sub) - names
            if bad:
                raise ConfigError(f"unknown keys in {name}: {sorted(bad)}")
            parts[name] = klass(**sub)
        cfg = cls(**parts)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_dict(d)

    def validate(self) -> None:
        try:
            self.fusion.validate()
            self.model.validate()
            self.train.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def with_overrides(self, overrides) -> "RunConfig":
        """Apply ``section.key=value`` strings; values parse as JSON, falling back to strings."""
        d = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            parts = key.strip().split(".")
            if len(parts) != 2 or parts[0] not in d or parts[1] not in d[parts[0]]:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            d[parts[0]][parts[1]] = value
        return RunConfig.from_dict(d)


def css_config(**train_overrides) -> RunConfig:
    """The CSS-shaped desk setup: coarse tokens only, one block, identity attention."""
    cfg = RunConfig()
    cfg.fusion.num_blocks = 1
    cfg.fusion.f = "identity"
    cfg.model.resolutions = ["coarse"]
    for k, v in train_overrides.items():
        setattr(cfg.train, k, v)
    return cfg
