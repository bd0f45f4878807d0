"""Engine configuration: one JSON document aggregating every stage's dataclass config.

Schema (all keys optional; defaults shown by ``EngineConfig().to_dict()``)::

    {
      "paths": {"data": "<input CSV or empty>", "artifacts": "<output dir>"},
      "grid": {"zoom": 18, "bbox": [lon_min, lat_min, lon_max, lat_max] | null},
      "clean": {CleanConfig fields},
      "synthetic": {SyntheticConfig fields},
      "node2vec": {Node2VecConfig fields except seed},
      "model": {ModelConfig fields except seed},
      "train": {TrainConfig fields except seed},
      "measure": "dtw" | "dfd" | "edwp",
      "metric_ks": [1, 5, 10, 20, 50],
      "rm_pairs": [[5, 20], [10, 50]],
      "visual_scale": 8,
      "threads": 0,
      "seed": 0
    }

``seed`` is the single source of randomness; the stage configs receive it when
resolved. A relative ``paths.data`` is taken relative to the config file's
directory, a relative ``paths.artifacts`` relative to the working directory.
``--config sample`` selects the bundled 100-trajectory sample configuration.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional

from .geo import DomainError, GridSpec
from .model.encoder import ModelConfig
from .oracles import Measure
from .preprocess import CleanConfig
from .region import Node2VecConfig
from .synthetic import SyntheticConfig
from .train import TrainConfig


SAMPLE_CONFIG = Path(__file__).parent / "data" / "sample_config.json"


class ConfigError(DomainError):
    pass


@dataclass
class Paths:
    data: str = ""
    artifacts: str = "artifacts"


@dataclass
class EngineConfig:
    paths: Paths = field(default_factory=Paths)
    grid: GridSpec = field(default_factory=lambda: GridSpec(18, SyntheticConfig().bbox))
    clean: CleanConfig = field(default_factory=CleanConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    node2vec: Node2VecConfig = field(default_factory=Node2VecConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    measure: str = "dtw"
    metric_ks: List[int] = field(default_factory=lambda: [1, 5, 10, 20, 50])
    rm_pairs: List[List[int]] = field(default_factory=lambda: [[5, 20], [10, 50]])
    visual_scale: int = 8
    threads: int = 0
    seed: int = 0
    base_dir: str = field(default=".", repr=False)

    def __post_init__(self):
        Measure.parse(self.measure)
        if self.threads < 0:
            raise ConfigError("threads must be >= 0 (0 = all cores)")

    # seeded views of the stage configs
    def node2vec_cfg(self) -> Node2VecConfig:
        return replace(self.node2vec, seed=self.seed)

    def model_cfg(self) -> ModelConfig:
        return replace(self.model, seed=self.seed)

    def train_cfg(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    @property
    def artifacts(self) -> Path:
        return Path(self.paths.artifacts)

    def to_dict(self) -> Dict[str, Any]:
        out = {}
        for f in fields(self):
            if f.name == "base_dir":
                continue
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                v = dataclasses.asdict(v)
                if f.name in _SEEDED:
                    v.pop("seed", None)
            out[f.name] = v
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


_SECTIONS = {
    "paths": Paths,
    "grid": GridSpec,
    "clean": CleanConfig,
    "synthetic": SyntheticConfig,
    "node2vec": Node2VecConfig,
    "model": ModelConfig,
    "train": TrainConfig,
}
_SEEDED = {"node2vec", "model", "train"}
_TUPLE_FIELDS = {("grid", "bbox"), ("synthetic", "bbox")}


def _section(name: str, values: Any):
    cls = _SECTIONS[name]
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)} - ({"seed"} if name in _SEEDED else set())
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {unknown}; known: {sorted(known)}")
    values = {k: (tuple(v) if (name, k) in _TUPLE_FIELDS and v is not None else v) for k, v in values.items()}
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"section {name!r}: {exc}") from None


def from_dict(data: Dict[str, Any], base_dir: str = ".") -> EngineConfig:
    top = {f.name for f in fields(EngineConfig)} - {"base_dir"}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {unknown}")
    kwargs: Dict[str, Any] = {"base_dir": base_dir}
    for k, v in data.items():
        kwargs[k] = _section(k, v) if k in _SECTIONS else v
    return EngineConfig(**kwargs)


def load_config(path: Optional[str]) -> EngineConfig:
    if not path:
        return EngineConfig()
    p = Path(path)
    if path == "sample" and not p.exists():
        p = SAMPLE_CONFIG
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return from_dict(data, str(p.parent))


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(cfg: EngineConfig, overrides: List[str]) -> EngineConfig:
    """Apply ``section.key=value`` (or ``key=value`` for top-level) overrides; values parse as JSON."""
    data = cfg.to_dict()
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"override {item!r}: no section {p!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"override {item!r}: unknown key {key!r}")
        node[parts[-1]] = _parse_value(raw)
    return from_dict(data, cfg.base_dir)
