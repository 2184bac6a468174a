"""Run configuration: nested dataclasses loaded from YAML.

Unknown keys are rejected. ``LSBI_SEED`` and ``LSBI_WORKERS`` override the
global seed and worker count; command-line flags override both.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import yaml

from .building import FrequencyGrid, ShearBuildingSpec
from .dataset import NoiseModel
from .errors import ParameterError
from .mvae import MVAEArchitecture, TrainingConfig
from .smc import SMCConfig


class ConfigError(ParameterError):
    pass


STAGES = ("prior", "noise", "split", "init", "training", "observation", "smc", "evaluation")


@dataclass
class PriorConfig:
    low: float = 0.33
    high: float = 3.00


@dataclass
class DatasetConfig:
    n_train: int = 100_000
    val_frac: float = 0.1
    output_story: int | None = None


@dataclass
class ObservationConfig:
    theta: list = field(default_factory=lambda: [1.0, 1.0, 1.0, 1.0])


@dataclass
class EvaluationConfig:
    mmd_bandwidth: float | None = None
    max_reference: int = 5000
    mode_radius: float = 0.15
    n_predictive_draws: int = 500
    n_projection_samples: int = 2000


@dataclass
class BenchmarkConfig:
    n_particles: list = field(default_factory=lambda: [500, 1000, 2000])
    n_runs: int = 10
    reference_particles: int = 50_000


@dataclass
class RunConfig:
    rng_seed: int = 0
    workers: int = 1
    out_dir: str = "out"
    building: ShearBuildingSpec = field(default_factory=ShearBuildingSpec)
    grid: FrequencyGrid = field(default_factory=FrequencyGrid)
    noise: NoiseModel = field(default_factory=NoiseModel)
    prior: PriorConfig = field(default_factory=PriorConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    architecture: MVAEArchitecture = field(default_factory=MVAEArchitecture)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    observation: ObservationConfig = field(default_factory=ObservationConfig)
    smc: SMCConfig = field(default_factory=SMCConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)

    def seed_for(self, stage: str, offset: int = 0) -> int:
        """Stage seed derived from the global seed via a SeedSequence."""
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        seq = np.random.SeedSequence([self.rng_seed, STAGES.index(stage), offset])
        return int(seq.generate_state(1)[0])

    def bounds(self, dim=None):
        dim = dim or self.building.n_stories
        return np.full(dim, self.prior.low), np.full(dim, self.prior.high)

    def to_dict(self) -> dict:
        d = asdict(self)
        # tuples are not plain YAML; lists round-trip
        return _listify(d)


def _listify(obj):
    if isinstance(obj, dict):
        return {k: _listify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_listify(v) for v in obj]
    return obj


def _build(cls, data, path):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {path or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _nested_type(cls, fields[name])
        kwargs[name] = _build(sub, value, f"{path}.{name}" if path else name) if sub else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {path or 'config'}: {exc}") from exc


def _nested_type(cls, f):
    default_factory = f.default_factory
    if default_factory is not dataclasses.MISSING and dataclasses.is_dataclass(default_factory):
        return default_factory
    return None


def load_config(path=None, overrides=None, env=None) -> RunConfig:
    """Defaults, then the YAML file, then environment, then ``overrides``."""
    data = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: malformed YAML: {exc}") from exc
    cfg = _build(RunConfig, data, "")
    env = os.environ if env is None else env
    for key, attr in (("LSBI_SEED", "rng_seed"), ("LSBI_WORKERS", "workers")):
        if env.get(key):
            try:
                setattr(cfg, attr, int(env[key]))
            except ValueError as exc:
                raise ConfigError(f"{key} must be an integer, got {env[key]!r}") from exc
    for attr, value in (overrides or {}).items():
        if value is not None:
            setattr(cfg, attr, value)
    # block seeds are derived; an explicit value must agree (resolved configs reload)
    for block in ("training", "smc"):
        derived = cfg.seed_for(block)
        given = (data.get(block) or {}).get("rng_seed") if isinstance(data, dict) else None
        if given is not None and given != derived:
            raise ConfigError(f"{block}.rng_seed is derived from the top-level rng_seed "
                              f"(expected {derived}, got {given}); set rng_seed instead")
        setattr(cfg, block, dataclasses.replace(getattr(cfg, block), rng_seed=derived))
    if cfg.workers < 1:
        raise ConfigError(f"workers must be >= 1, got {cfg.workers}")
    if not cfg.prior.high > cfg.prior.low:
        raise ConfigError(f"invalid prior bounds: low={cfg.prior.low}, high={cfg.prior.high}")
    if len(cfg.observation.theta) != cfg.building.n_stories:
        raise ConfigError("observation.theta length must equal building.n_stories")
    if cfg.architecture.n_x != cfg.grid.n_points:
        raise ConfigError(
            f"architecture.n_x ({cfg.architecture.n_x}) must equal grid.n_points "
            f"({cfg.grid.n_points})"
        )
    if cfg.architecture.n_theta != cfg.building.n_stories:
        raise ConfigError("architecture.n_theta must equal building.n_stories")
    return cfg


def dump_config(cfg: RunConfig, path):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
