"""Run configuration: one JSON document with a section per component.

Example::

    {
      "grid": {"cell_x": 0.25},
      "transport": {"relative_epsilon": 0.03},
      "weights": {"alpha": 0.05, "beta": 1.0, "gamma": 0.1, "sigma": 0.2},
      "train": {"epochs": 10, "seed": 0},
      "scene": {"n_movers": 3, "artifact_rate": 1.0},
      "dataset": {"n_sequences": 10},
      "paths": {"out": "runs"}
    }

Every section is optional; unknown sections or keys are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .geometry import GridSpec
from .ground import GroundParams
from .losses import LossWeights
from .synth import SceneSpec
from .training import TrainConfig
from .transport import TransportConfig


@dataclass(frozen=True)
class DatasetOptions:
    n_sequences: int = 10

    def __post_init__(self):
        if self.n_sequences < 1:
            raise ValueError("n_sequences must be >= 1")


@dataclass(frozen=True)
class Paths:
    out: str = "runs"
    dataset: str | None = None
    checkpoint: str | None = None


@dataclass(frozen=True)
class RunConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    ground: GroundParams = field(default_factory=GroundParams)
    transport: TransportConfig = field(default_factory=TransportConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    dataset: DatasetOptions = field(default_factory=DatasetOptions)
    paths: Paths = field(default_factory=Paths)

    @property
    def train_config(self) -> TrainConfig:
        """TrainConfig carrying this run's loss weights."""
        return replace(self.train, weights=self.weights)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            section = _plain(dataclasses.asdict(getattr(self, f.name)))
            if f.name == "train":
                section.pop("weights", None)
            out[f.name] = section
        return out

    def hash(self) -> str:
        """sha256 of the canonical JSON form; the output location is not part of it."""
        d = self.to_dict()
        d["paths"].pop("out", None)
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _tupled(value):
    if isinstance(value, list):
        return tuple(_tupled(v) for v in value)
    return value


_SECTIONS = {f.name: f for f in fields(RunConfig)}


def _build_section(name: str, cls, values, base=None):
    if not isinstance(values, dict):
        raise ConfigError(f"config section '{name}' must be an object")
    known = {f.name for f in fields(cls)}
    if cls is TrainConfig:
        known.discard("weights")
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(unknown)}")
    current = dataclasses.asdict(base) if base is not None else {}
    if cls is TrainConfig:
        current.pop("weights", None)
    current = {k: _tupled(v) if isinstance(v, list) else v for k, v in current.items()}
    current.update({k: _tupled(v) for k, v in values.items()})
    try:
        if cls is TrainConfig:
            return cls(**current, weights=base.weights if base is not None else LossWeights())
        if cls is SceneSpec:
            return SceneSpec.from_dict(current)
        return cls(**current)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from exc


def config_from_dict(data: dict, base: RunConfig | None = None) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    cfg = base or RunConfig()
    updates = {}
    for name, values in data.items():
        cls = type(getattr(cfg, name))
        updates[name] = _build_section(name, cls, values, getattr(cfg, name))
    return replace(cfg, **updates)


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"unreadable config {path}: {exc}") from exc
    return config_from_dict(data)


def override(cfg: RunConfig, section: str, **values) -> RunConfig:
    """Apply command-line overrides to one section, with the same validation as the file."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    return config_from_dict({section: values}, cfg)
