"""Run configuration: one JSON file, flat dotted-path overrides.

Sections mirror the pipeline stages. All seeds are explicit values with no
wall-clock fallbacks, so a config fully pins a run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**d)


@dataclass
class PathsConfig:
    data: str | None = None  # input dataset; defaults to the synth artifact
    out: str = "runs/out"


@dataclass
class PreprocessConfig:
    base_px: int = 1410
    side_px: int = 112
    meters_per_pixel: float = 0.5
    height_min: float = 0.0
    height_max: float = 100.0

    @property
    def height_bounds(self) -> tuple[float, float]:
        return (self.height_min, self.height_max)


@dataclass
class ModelConfig:
    codebook_size: int = 512
    code_dim: int = 32
    channels: list = field(default_factory=lambda: [32, 64, 32])
    beta: float = 0.25
    seed: int = 0


@dataclass
class TrainingConfig:
    epochs: int = 30
    learning_rate: float = 1e-3
    batch_size: int = 16
    finetune: bool = False
    task_weights: dict = field(default_factory=lambda: {"program": 1.0, "vintage": 1.0, "height": 1.0})


@dataclass
class ClusteringConfig:
    reduction: str = "pca"  # "pca" | "none_flatten"
    components: int = 64
    k: object = None  # int, {use_class: int}, or None for elbow selection
    k_range: list = field(default_factory=lambda: [1, 2, 3, 4, 5, 6])
    elbow_min: int = 2
    elbow_max: int = 5
    restarts: int = 10
    seed: int = 0

    def k_for(self, use_class: str) -> int | None:
        if self.k is None:
            return None
        if isinstance(self.k, dict):
            value = self.k.get(use_class)
            return None if value is None else int(value)
        return int(self.k)


@dataclass
class EnergyConfig:
    eui_source: str = "surrogate"  # "surrogate" | "table" | "fixture"
    eui_table: str | None = None
    ground_truth: str | None = None  # defaults to the synth artifact
    baseline_table: str | None = None


@dataclass
class SynthConfig:
    n: int = 500
    seed: int = 0
    class_mix: dict = field(default_factory=lambda: {"SFH": 0.7, "MFH": 0.3})
    shape_families: list = field(default_factory=lambda: ["rectangle", "L", "T", "U"])
    vintage_shape_correlation: float = 0.75
    height_range: list = field(default_factory=lambda: [3.0, 30.0])
    side_range: list = field(default_factory=lambda: [8.0, 40.0])
    offset_range: float = 200.0


_SECTIONS = {
    "paths": PathsConfig,
    "preprocessing": PreprocessConfig,
    "model": ModelConfig,
    "training": TrainingConfig,
    "clustering": ClusteringConfig,
    "energy": EnergyConfig,
    "synth": SynthConfig,
}


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    preprocessing: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        kwargs = {}
        for name, section_cls in _SECTIONS.items():
            kwargs[name] = _build(section_cls, d.get(name, {}), name)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path, overrides: list[str] | None = None) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        for item in overrides or []:
            apply_override(raw, item)
        return cls.from_dict(raw)

    def validate(self) -> None:
        pre = self.preprocessing
        if pre.side_px < 8 or pre.side_px % 4 != 0:
            raise ConfigError(f"preprocessing.side_px must be a multiple of 4 >= 8, got {pre.side_px}")
        if pre.base_px < pre.side_px:
            raise ConfigError(f"preprocessing.base_px {pre.base_px} < side_px {pre.side_px}")
        if pre.meters_per_pixel <= 0:
            raise ConfigError(f"preprocessing.meters_per_pixel must be > 0")
        if pre.height_max <= pre.height_min:
            raise ConfigError(f"height bounds ({pre.height_min}, {pre.height_max}) invalid")
        if self.clustering.reduction not in ("pca", "none_flatten"):
            raise ConfigError(f"clustering.reduction {self.clustering.reduction!r} unknown")
        if self.energy.eui_source not in ("surrogate", "table", "fixture"):
            raise ConfigError(f"energy.eui_source {self.energy.eui_source!r} unknown")
        if self.energy.eui_source in ("table", "fixture") and not self.energy.eui_table:
            raise ConfigError(f"energy.eui_source {self.energy.eui_source!r} needs energy.eui_table")
        if self.training.epochs < 0:
            raise ConfigError("training.epochs must be >= 0")

    def out_dir(self) -> Path:
        return Path(self.paths.out)


def apply_override(raw: dict, item: str) -> None:
    """Apply one 'section.key=value' override; values parse as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key.path=value")
    key, value = item.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) < 2 or parts[0] not in _SECTIONS:
        raise ConfigError(f"override key {key!r} must start with a config section")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    node = raw
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-object")
    node[parts[-1]] = parsed
