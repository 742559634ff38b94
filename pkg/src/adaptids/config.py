"""Declarative run configuration.

One JSON document drives training, evaluation, the experiment grid,
and the service.  Every tunable default lives here so a config file
can override it; unknown keys are rejected loudly instead of being
ignored.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .heads import DISTANCES, HEAD_KINDS, KIND_DOC, KIND_DOCPP
from .model import TrainConfig


@dataclass
class DataSection:
    """Where flows come from."""

    profiles_path: Optional[str] = None   # None -> built-in pool
    pool_size: int = 6
    flows_per_class: int = 500
    test_fraction: float = 0.3
    seed: int = 11


@dataclass
class ArchSection:
    """Network shape overrides."""

    input_dim: int = 20000
    conv_width: int = 20
    conv_channels: int = 10
    conv_stride: int = 10
    fc1_units: int = 500


@dataclass
class TrainSection:
    """Optimizer settings."""

    epochs: int = 6
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 3

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate,
                           beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                           shuffle_seed=self.seed)


@dataclass
class HeadSection:
    """Which decision procedures run and how they reject."""

    kinds: list = field(default_factory=lambda: [KIND_DOCPP, KIND_DOC])
    threshold: float = 0.5
    openmax_tail_size: int = 20
    openmax_alpha: int = 3
    openmax_distance: str = "euclidean"
    openmax_threshold: float = 0.5


@dataclass
class GridSection:
    """Experiment grid shape."""

    known_classes: int = 4
    accept_threshold: float = 0.70
    posttrain_epochs: int = 0       # grid runs skip refinement by default
    pull_weight: float = 0.1
    cluster_seed: int = 5


@dataclass
class SingleRunSection:
    """Explicit label assignment for train/eval outside the grid."""

    known_labels: list = field(default_factory=list)
    unknown_train_label: Optional[str] = None
    novelty_label: Optional[str] = None


@dataclass
class LifecycleSection:
    """Serving loop settings."""

    buffer_capacity: int = 10000
    buffer_trigger: int = 200
    k_max: int = 8
    cluster_seed: int = 0
    retention: int = 3
    include_benign: bool = False
    benign_label: Optional[str] = None
    min_val_accuracy: float = 0.8
    val_fraction: float = 0.2
    posttrain_epochs: int = 5
    pull_weight: float = 0.1
    retrain_seed: int = 7


@dataclass
class ServiceSection:
    """HTTP endpoint settings."""

    host: str = "127.0.0.1"
    port: int = 8787
    token: Optional[str] = None
    static_dir: Optional[str] = None


@dataclass
class RunConfig:
    """Everything a run needs, with defaults for every knob."""

    data: DataSection = field(default_factory=DataSection)
    arch: ArchSection = field(default_factory=ArchSection)
    train: TrainSection = field(default_factory=TrainSection)
    heads: HeadSection = field(default_factory=HeadSection)
    grid: GridSection = field(default_factory=GridSection)
    run: SingleRunSection = field(default_factory=SingleRunSection)
    lifecycle: LifecycleSection = field(default_factory=LifecycleSection)
    service: ServiceSection = field(default_factory=ServiceSection)
    outdir: str = "reports"

    def validate(self) -> None:
        if not (0.0 < self.data.test_fraction < 1.0):
            raise ConfigError("data.test_fraction must be in (0, 1)")
        if self.data.flows_per_class < 4:
            raise ConfigError("data.flows_per_class too small to split")
        for kind in self.heads.kinds:
            if kind not in HEAD_KINDS:
                raise ConfigError(f"unknown head kind {kind!r}, "
                                  f"choose from {list(HEAD_KINDS)}")
        if not self.heads.kinds:
            raise ConfigError("heads.kinds must not be empty")
        if self.heads.openmax_distance not in DISTANCES:
            raise ConfigError(
                f"unknown openmax distance {self.heads.openmax_distance!r}")
        if not (0.0 < self.grid.accept_threshold <= 1.0):
            raise ConfigError("grid.accept_threshold must be in (0, 1]")
        if self.grid.known_classes < 2:
            raise ConfigError("grid.known_classes must be at least 2")
        if self.data.pool_size < self.grid.known_classes + 1:
            raise ConfigError(
                "label pool must exceed the known subset by at least one")
        if self.lifecycle.include_benign and not self.lifecycle.benign_label:
            raise ConfigError(
                "lifecycle.include_benign needs lifecycle.benign_label")
        r = self.run
        if r.novelty_label and r.novelty_label in r.known_labels:
            raise ConfigError("run.novelty_label cannot be a known label")
        if r.unknown_train_label:
            if r.unknown_train_label in r.known_labels:
                raise ConfigError(
                    "run.unknown_train_label cannot be a known label")
            if r.unknown_train_label == r.novelty_label:
                raise ConfigError(
                    "run.unknown_train_label must differ from the novelty")


_SECTION_TYPES = {
    "data": DataSection, "arch": ArchSection, "train": TrainSection,
    "heads": HeadSection, "grid": GridSection, "run": SingleRunSection,
    "lifecycle": LifecycleSection, "service": ServiceSection,
}


def _build_section(cls, doc: dict, where: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}; "
                          f"allowed: {sorted(allowed)}")
    return cls(**doc)


def config_from_dict(doc: dict, where: str = "config") -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected a JSON object")
    unknown = set(doc) - set(_SECTION_TYPES) - {"outdir"}
    if unknown:
        raise ConfigError(f"{where}: unknown sections {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTION_TYPES.items():
        if name in doc:
            if not isinstance(doc[name], dict):
                raise ConfigError(f"{where}.{name}: expected an object")
            kwargs[name] = _build_section(cls, doc[name], f"{where}.{name}")
    if "outdir" in doc:
        kwargs["outdir"] = str(doc["outdir"])
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return config_from_dict(doc, where=str(path))


def default_config() -> RunConfig:
    cfg = RunConfig()
    cfg.validate()
    return cfg
