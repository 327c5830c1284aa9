"""Run configuration: a strict TOML document with one table per section."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .backbone import BackboneSpec
from .data import SCALE, DegradationSpec
from .losses import LossWeights
from .schedules import ScheduleConfig, StepCurriculum
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Paths:
    data: str = "data"
    checkpoints: str = "checkpoints"
    reports: str = "reports"


@dataclass(frozen=True)
class CorpusConfig:
    n_images: int = 500
    patch_size: int = 32
    seed: int = 0


@dataclass
class RunConfig:
    schedule: ScheduleConfig = field(default_factory=lambda: ScheduleConfig(total_steps=4))
    curriculum: StepCurriculum = field(default_factory=StepCurriculum)
    train: TrainConfig = field(default_factory=TrainConfig)
    degradation: DegradationSpec = field(default_factory=DegradationSpec)
    weights: LossWeights = field(default_factory=LossWeights)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    paths: Paths = field(default_factory=Paths)

    def __post_init__(self):
        if self.curriculum.s0 > self.schedule.total_steps:
            raise ConfigError(
                f"curriculum.s0={self.curriculum.s0} exceeds schedule.total_steps={self.schedule.total_steps}"
            )
        side = self.corpus.patch_size
        if side % SCALE or side % self.backbone.spatial_multiple:
            raise ConfigError(
                f"corpus.patch_size={side} must be divisible by {SCALE} and {self.backbone.spatial_multiple}"
            )
        # the training config carries the curriculum and weights it is run with
        self.train = dataclasses.replace(self.train, curriculum=self.curriculum, weights=self.weights)

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, seed=int(seed)))

    def resolve(self, base: Path) -> "RunConfig":
        """Make relative paths relative to ``base`` (the config file's directory)."""
        resolved = {f.name: str((base / getattr(self.paths, f.name)).resolve())
                    for f in dataclasses.fields(Paths)}
        return dataclasses.replace(self, paths=Paths(**resolved))


_SECTIONS = {
    "schedule": ScheduleConfig,
    "curriculum": StepCurriculum,
    "train": TrainConfig,
    "degradation": DegradationSpec,
    "weights": LossWeights,
    "backbone": BackboneSpec,
    "corpus": CorpusConfig,
    "paths": Paths,
}
_NESTED = {"curriculum", "weights"}  # TrainConfig fields filled from their own sections


def _build(section: str, cls, values: dict):
    allowed = {f.name for f in dataclasses.fields(cls) if not f.name.startswith("_")}
    if cls is TrainConfig:
        allowed -= _NESTED
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}]: {exc}") from exc


def from_dict(doc: dict) -> RunConfig:
    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    parts = {}
    for name, cls in _SECTIONS.items():
        values = doc.get(name, {})
        if not isinstance(values, dict):
            raise ConfigError(f"[{name}] must be a table")
        parts[name] = _build(name, cls, values)
    if "total_steps" not in doc.get("schedule", {}):
        # an unspecified grid starts where the curriculum starts
        values = {**doc.get("schedule", {}), "total_steps": parts["curriculum"].s0}
        parts["schedule"] = _build("schedule", ScheduleConfig, values)
    if "K" not in doc.get("curriculum", {}):
        cur = parts["curriculum"]
        parts["curriculum"] = _build("curriculum", StepCurriculum,
                                     {"s0": cur.s0, "s1": cur.s1, "K": parts["train"].stage1_iters})
    return RunConfig(**parts)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(doc).resolve(path.parent)
