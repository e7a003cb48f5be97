"""Experiment configuration: one YAML document covering data, model, training and paths."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .model import ModelConfig
from .projsim import Geometry, PhantomSpec
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSection:
    seed: int = 0
    num_ellipses_range: tuple[int, int] = (5, 10)
    density_range: tuple[float, float] = (0.1, 0.5)
    background_density: float = 1.0

    def spec(self, seed: Optional[int] = None) -> PhantomSpec:
        return PhantomSpec(self.seed if seed is None else seed, tuple(self.num_ellipses_range),
                           tuple(self.density_range), self.background_density)


@dataclass(frozen=True)
class GeometrySection:
    num_angles: int = 360
    detector_bins: int = 128
    num_rows: int = 64
    circular: bool = True
    angle_start: float = 0.0
    # defaults to a full circle (circular) or one degree per frame
    angle_step: Optional[float] = None

    def build(self) -> Geometry:
        step = self.angle_step
        if step is None:
            step = 2 * math.pi / self.num_angles if self.circular else math.pi / 180
        return Geometry(self.num_angles, self.angle_start, step, self.detector_bins, self.num_rows, self.circular)


@dataclass(frozen=True)
class NoiseSection:
    lam: float = 50.0
    a: float = 1e-3
    seed: int = 0


@dataclass(frozen=True)
class DataSection:
    """Phantom seeds simulated on the fly when no stack files are given."""
    train_seeds: tuple[int, ...] = (1, 2)
    val_seeds: tuple[int, ...] = (3,)


@dataclass(frozen=True)
class ReconSection:
    grid: int = 128
    window: str = "ramlak"


@dataclass(frozen=True)
class PathsSection:
    train: tuple[str, ...] = ()
    val: tuple[str, ...] = ()
    checkpoint: Optional[str] = None


_SECTIONS = {
    "phantom": PhantomSection,
    "geometry": GeometrySection,
    "noise": NoiseSection,
    "data": DataSection,
    "model": ModelConfig,
    "train": TrainConfig,
    "recon": ReconSection,
    "paths": PathsSection,
}
# YAML spelling -> field name, for keys that are Python keywords or clash
_ALIASES = {"noise": {"lambda": "lam"}}


@dataclass(frozen=True)
class ExperimentConfig:
    phantom: PhantomSection = field(default_factory=PhantomSection)
    geometry: GeometrySection = field(default_factory=GeometrySection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    recon: ReconSection = field(default_factory=ReconSection)
    paths: PathsSection = field(default_factory=PathsSection)

    @classmethod
    def from_dict(cls, doc: Optional[dict]) -> "ExperimentConfig":
        doc = doc or {}
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a mapping")
        unknown = set(doc) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        built = {}
        for name, section_cls in _SECTIONS.items():
            values = dict(doc.get(name) or {})
            for src, dst in _ALIASES.get(name, {}).items():
                if src in values:
                    values[dst] = values.pop(src)
            names = {f.name for f in dataclasses.fields(section_cls)}
            bad = set(values) - names
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
            values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
            try:
                built[name] = section_cls(**values)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid [{name}]: {exc}") from exc
        return cls(**built)

    def to_dict(self) -> dict:
        out = {}
        for name in _SECTIONS:
            section = getattr(self, name)
            values = {f.name: getattr(section, f.name) for f in dataclasses.fields(section)}
            for src, dst in _ALIASES.get(name, {}).items():
                values[src] = values.pop(dst)
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in values.items()}
        return out

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Apply a single ``--seed`` to phantom, noise and training streams."""
        return dataclasses.replace(
            self,
            phantom=dataclasses.replace(self.phantom, seed=seed),
            noise=dataclasses.replace(self.noise, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
        )


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return ExperimentConfig.from_dict(doc)


def dump_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
