"""Experiment configuration: nested dataclasses, YAML files, dotted overrides."""
from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from typing import List, Optional

import yaml

__all__ = [
    "ConfigError", "DatasetSpec", "EnergySpec", "SamplerSpec", "ReplaySpec", "ObjectiveCfg",
    "OptimizerSpec", "ExperimentConfig", "default_seed", "apply_overrides",
]

SEED_ENV = "EBMFORGE_SEED"


class ConfigError(ValueError):
    pass


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _choice(name, value, options):
    if value not in options:
        raise ConfigError(f"{name} must be one of {sorted(options)}, got {value!r}")


@dataclass
class DatasetSpec:
    kind: str = "mixture2d"        # mixture2d | rings2d | synthetic_digits | idx_file
    size: int = 10000
    modes: int = 8
    radius: float = 4.0
    std: float = 0.25
    ring_radii: List[float] = field(default_factory=lambda: [2.0, 4.0])
    path: Optional[str] = None
    downsample: bool = False
    limit: Optional[int] = None

    def validate(self):
        _choice("dataset.kind", self.kind, {"mixture2d", "rings2d", "synthetic_digits", "idx_file"})
        if self.kind == "idx_file" and not self.path:
            raise ConfigError("dataset.path is required for idx_file")


@dataclass
class EnergySpec:
    kind: str = "mlp"              # mlp | quadratic | grid
    hidden: List[int] = field(default_factory=lambda: [64, 64])
    activation: str = "softplus"
    spectral_norm: bool = False
    scales: List[int] = field(default_factory=list)   # extra downsampled experts (raster only)
    init_mean: Optional[List[float]] = None           # quadratic
    grid_low: float = -6.0
    grid_high: float = 6.0
    grid_nodes: int = 5
    init_scale: float = 0.0          # grid: node values start as N(0, init_scale^2)

    def validate(self):
        _choice("energy.kind", self.kind, {"mlp", "quadratic", "grid"})
        _choice("energy.activation", self.activation, {"softplus", "tanh"})


@dataclass
class SamplerSpec:
    step_size: float = 0.01
    noise_std: Optional[float] = None
    steps: int = 60
    adjusted: bool = False
    clamp: Optional[List[float]] = None            # [low, high]
    transition: Optional[str] = None               # gaussian_jitter | elastic_deformation | mode_jump
    transition_scale: float = 0.1
    transition_amplitude: float = 1.0
    grid_spacing: int = 4
    period: int = 100
    augment_inits: bool = False                    # also transform every init drawn for training

    def validate(self):
        if self.transition is not None:
            _choice("sampler.transition", self.transition,
                    {"gaussian_jitter", "elastic_deformation", "mode_jump"})
        if self.clamp is not None and len(self.clamp) != 2:
            raise ConfigError("sampler.clamp must be [low, high]")


@dataclass
class ReplaySpec:
    policy: str = "noise_reservoir"      # noise_reservoir | true_cd | persistent_cd
    capacity: int = 10000
    noise_reinit_prob: float = 0.01
    reset_prob: float = 0.1
    reset_to_data_prob: float = 0.0
    full_reset_every: Optional[int] = None
    noise_low: float = -6.0
    noise_high: float = 6.0

    def validate(self):
        _choice("replay.policy", self.policy, {"noise_reservoir", "true_cd", "persistent_cd"})


@dataclass
class ObjectiveCfg:
    variant: str = "mcmc_nll"
    kl_sign: str = "correct"
    kl_weight: float = 1.0
    k_backprop: int = 1
    entropy_bank_size: int = 1000
    grid_low: Optional[List[float]] = None     # quadrature box for exact_nll / oracle cosine
    grid_high: Optional[List[float]] = None
    grid_nodes: int = 101

    def validate(self):
        _choice("objective.variant", self.variant, {"exact_nll", "mcmc_nll", "cd_star", "cd_kl"})
        _choice("objective.kl_sign", self.kl_sign, {"correct", "flipped"})


@dataclass
class OptimizerSpec:
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 0.1

    def validate(self):
        pass


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    energy: EnergySpec = field(default_factory=EnergySpec)
    sampler: SamplerSpec = field(default_factory=SamplerSpec)
    replay: ReplaySpec = field(default_factory=ReplaySpec)
    objective: ObjectiveCfg = field(default_factory=ObjectiveCfg)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    steps: int = 1000
    batch_size: int = 128
    seed: int = field(default_factory=default_seed)
    output_dir: Optional[str] = None
    checkpoint_every: int = 0          # 0 disables checkpoints
    log_every: int = 1
    metrics_format: str = "csv"

    def validate(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                v.validate()
        if self.steps < 0 or self.batch_size < 1 or self.log_every < 1 or self.checkpoint_every < 0:
            raise ConfigError("steps >= 0, batch_size >= 1, log_every >= 1, checkpoint_every >= 0")
        _choice("metrics_format", self.metrics_format, {"csv", "jsonl"})
        return self

    # ---- serialization

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return _build(cls, data or {}, "").validate()

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        data = yaml.safe_load(text)
        if data is not None and not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping at top level")
        return cls.from_dict(data)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_yaml())

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_yaml(fh.read())


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'} must be a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(value, tp, prefix + name)
    return cls(**kwargs)


def _coerce(value, tp, name):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(f"{name} may not be null")
        tp = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(tp), typing.get_args(tp)
    if origin in (list, List):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name} must be a list")
        return [_coerce(v, args[0], name) for v in value]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer")
        return value
    if tp is float:
        if isinstance(value, str):
            # YAML 1.1 reads "1e-4" as a string
            try:
                return float(value)
            except ValueError:
                raise ConfigError(f"{name} must be a number") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string")
        return value
    return value


def apply_overrides(config: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``key.path=value`` strings; values are parsed as YAML scalars/lists."""
    data = config.to_dict()
    for item in overrides:
        item = item[2:] if item.startswith("--") else item
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        node = data
        parts = key.replace("-", "_").split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config key: {key}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key: {key}")
        node[parts[-1]] = yaml.safe_load(raw)
    return ExperimentConfig.from_dict(data)
