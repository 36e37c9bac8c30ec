"""Run configuration: one YAML file, strict keys, CLI overrides on top."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import SynthConfig
from .errors import ConfigError
from .objectives import ObjectiveConfig
from .scoring import EqualizationConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    base_channels: int = 8
    max_channels: int = 256
    latent_dim: int = 32


@dataclass(frozen=True)
class ScoringConfig:
    perceptual_backend: str = "encoder"
    median_size: int = 5
    top_percent: float = 1.0

    def __post_init__(self):
        if self.perceptual_backend not in ("encoder", "vgg16"):
            raise ConfigError(f"scoring.perceptual_backend: unknown backend {self.perceptual_backend!r}")
        if self.median_size < 0:
            raise ConfigError("scoring.median_size: must be >= 0")
        if not 0 < self.top_percent <= 100:
            raise ConfigError("scoring.top_percent: must lie in (0, 100]")


@dataclass(frozen=True)
class EvaluationConfig:
    percentile: float = 98.0
    min_blob_size: int = 5
    threshold: float | None = None


@dataclass(frozen=True)
class PathsConfig:
    data_root: str | None = None
    output_dir: str | None = None
    checkpoint: str | None = None


@dataclass(frozen=True)
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    equalization: EqualizationConfig = field(default_factory=EqualizationConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, objective=self.objective)

    def to_dict(self) -> dict:
        d = {}
        for f in dataclasses.fields(self):
            sub = dataclasses.asdict(getattr(self, f.name))
            if f.name == "train":
                sub.pop("objective", None)
            d[f.name] = _plain(sub)
        return d

    def dump(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False))
        return path


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _build(cls, section: str, values):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"{section}: expected a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    if cls is TrainConfig:
        known.discard("objective")
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}: unknown key")
    try:
        return cls(**values)
    except ConfigError as exc:
        msg = str(exc)
        raise ConfigError(msg if msg.startswith(section + ".") else f"{section}.{msg}") from exc
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


_SECTIONS = {f.name: f for f in dataclasses.fields(RunConfig)}
_CLASSES = {
    "paths": PathsConfig, "synth": SynthConfig, "model": ModelConfig, "objective": ObjectiveConfig,
    "train": TrainConfig, "equalization": EqualizationConfig, "scoring": ScoringConfig,
    "evaluation": EvaluationConfig,
}


def parse_config(raw: dict | None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from a nested mapping.

    ``overrides`` uses dotted keys (``"train.steps": 10``) and wins over ``raw``.
    """
    raw = dict(raw or {})
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown config section")
    merged = {k: dict(raw.get(k) or {}) for k in _SECTIONS}
    for key, value in (overrides or {}).items():
        section, _, name = key.partition(".")
        if section not in merged:
            raise ConfigError(f"{key}: unknown config section")
        merged[section][name] = value
    return RunConfig(**{k: _build(_CLASSES[k], k, v) for k, v in merged.items()})


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc})") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: malformed YAML ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(raw, overrides)
