"""Experiment configuration: TOML in, validated dataclasses out.

A config file holds one section per subsystem ([sim], [train], [stratify],
[select], [eval], [ablate], [sweep], [paths]); omitted keys fall back to the
defaults baked into the dataclasses. The fully resolved config is archived as
JSON next to every command's outputs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .policy import DISCRETE
from .simenv import SimConfig
from .stratify import MODES, RETURN_TIME
from .train import TrainConfig

DEFAULT_LAMBDA_GRID = (0.0, 0.001, 0.01, 0.1, 1.0)


class ConfigError(ValueError):
    """The experiment configuration is malformed or inconsistent."""


@dataclass
class StratifyConfig:
    mode: str = RETURN_TIME
    expert_threshold: float = 3.0
    k_levels: int = 3

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"stratify.mode must be one of {MODES}, got {self.mode!r}")
        if self.k_levels < 1:
            raise ConfigError(f"stratify.k_levels must be >= 1, got {self.k_levels}")


@dataclass
class SelectConfig:
    clusters_per_level: int = 32

    def validate(self) -> None:
        if self.clusters_per_level < 1:
            raise ConfigError(
                f"select.clusters_per_level must be >= 1, got {self.clusters_per_level}"
            )


@dataclass
class EvalConfig:
    episodes: int = 300

    def validate(self) -> None:
        if self.episodes < 1:
            raise ConfigError(f"eval.episodes must be >= 1, got {self.episodes}")


@dataclass
class AblateConfig:
    n_seeds: int = 5

    def validate(self) -> None:
        if self.n_seeds < 1:
            raise ConfigError(f"ablate.n_seeds must be >= 1, got {self.n_seeds}")


@dataclass
class SweepConfig:
    grid: tuple = DEFAULT_LAMBDA_GRID
    n_seeds: int = 3

    def validate(self) -> None:
        if len(self.grid) < 1:
            raise ConfigError("sweep.grid must not be empty")
        if any(g < 0 for g in self.grid):
            raise ConfigError("sweep.grid entries must be nonnegative")
        if self.n_seeds < 1:
            raise ConfigError(f"sweep.n_seeds must be >= 1, got {self.n_seeds}")


@dataclass
class PathsConfig:
    trajectories: str | None = None
    checkpoint: str | None = None
    manifest: str | None = None
    bank: str | None = None

    def validate(self) -> None:
        pass


@dataclass
class ExperimentConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    stratify: StratifyConfig = field(default_factory=StratifyConfig)
    select: SelectConfig = field(default_factory=SelectConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "ExperimentConfig":
        """Check every section plus cross-section dimension consistency."""
        try:
            self.sim.validate()
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.stratify.validate()
        self.select.validate()
        self.eval.validate()
        self.ablate.validate()
        self.sweep.validate()
        if self.train.action_kind != self.sim.action_kind:
            raise ConfigError(
                f"train.action_kind {self.train.action_kind!r} != "
                f"sim.action_kind {self.sim.action_kind!r}"
            )
        if self.train.action_kind == DISCRETE and self.train.n_classes != self.sim.n_items:
            raise ConfigError(
                f"train.n_classes {self.train.n_classes} != sim.n_items {self.sim.n_items}"
            )
        return self

    def with_base_seed(self, seed: int) -> "ExperimentConfig":
        return replace(
            self,
            sim=replace(self.sim, seed=seed),
            train=replace(self.train, seed=seed),
        )


_SECTIONS = {
    "sim": SimConfig,
    "train": TrainConfig,
    "stratify": StratifyConfig,
    "select": SelectConfig,
    "eval": EvalConfig,
    "ablate": AblateConfig,
    "sweep": SweepConfig,
    "paths": PathsConfig,
}

# Friendlier spellings accepted in config files.
_KEY_ALIASES = {("train", "lambda"): "lam"}


def _build_section(name: str, cls, data: dict):
    allowed = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        key = _KEY_ALIASES.get((name, key), key)
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in section [{name}]")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad section [{name}]: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    sections = {
        name: _build_section(name, cls, data.get(name, {})) for name, cls in _SECTIONS.items()
    }
    cfg = ExperimentConfig(**sections)
    # Discrete runs infer the head width from the catalogue size.
    if cfg.train.action_kind == DISCRETE and cfg.train.n_classes == 0:
        cfg = replace(cfg, train=replace(cfg.train, n_classes=cfg.sim.n_items))
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(data)


def default_config() -> ExperimentConfig:
    return config_from_dict({})


def resolved_dict(cfg: ExperimentConfig) -> dict:
    """Plain-JSON view of the fully resolved configuration."""
    doc = dataclasses.asdict(cfg)
    doc["sweep"]["grid"] = list(doc["sweep"]["grid"])
    doc["sim"]["expert_align"] = list(doc["sim"]["expert_align"])
    return doc
