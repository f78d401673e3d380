"""Plain-text run configuration: ``key = value`` lines, ``#`` comments, repeated ``factor`` lines."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from . import data as D
from .latent import FactorSpec, LatentSpec
from .losses import TrainingConfig, variant_name
from .models import ModelConfig

RESOLVED_NAME = "resolved.cfg"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # training
    beta: float = 1.0
    batch_size: int = 16
    steps: int = 2000
    lr: float = 1e-3
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    seed: int = 0
    instance_noise: float = 0.0
    style_enabled: bool = True
    sample_every: int = 500
    # latent
    noise_dim: int = 32
    factor: Tuple[FactorSpec, ...] = field(default_factory=lambda: LatentSpec.default().factors)
    # model
    mapping_layers: int = 4
    w_dim: int = 64
    dense_width: int = 64
    # data
    dataset_size: int = 6000
    data_seed: int = 0
    train_on: str = "inliers"
    outlier_shape: str = "ellipse"
    # metrics
    metric_samples: int = 2000
    pr_k: int = 3
    mc_samples: int = 20000
    inner_cap: int = 256
    # anomaly
    source: str = "dense"
    detector: str = "ocsvm"
    nu: float = 0.5
    gamma: Optional[float] = None
    lof_k: int = 20
    max_train: int = 2000

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.train_on not in ("all", "inliers"):
            raise ConfigError(f"train_on must be 'all' or 'inliers', got {self.train_on!r}")
        if self.outlier_shape not in D.SHAPES:
            raise ConfigError(f"outlier_shape must be one of {D.SHAPES}, got {self.outlier_shape!r}")
        if self.source not in ("q", "conv", "dense"):
            raise ConfigError(f"source must be q, conv or dense, got {self.source!r}")
        if self.detector not in ("ocsvm", "lof"):
            raise ConfigError(f"detector must be ocsvm or lof, got {self.detector!r}")
        if not 0 < self.nu <= 1:
            raise ConfigError(f"nu must be in (0, 1], got {self.nu}")
        if self.gamma is not None and not self.gamma > 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        for name in ("batch_size", "sample_every", "dataset_size", "metric_samples", "pr_k", "mc_samples",
                     "inner_cap", "lof_k", "max_train"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        try:
            self.latent_spec()
            self.training()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # derived objects

    def latent_spec(self) -> LatentSpec:
        return LatentSpec(self.noise_dim, tuple(self.factor))

    def model_config(self) -> ModelConfig:
        return ModelConfig(spec=self.latent_spec(), style_enabled=self.style_enabled,
                           mapping_layers=self.mapping_layers, w_dim=self.w_dim, dense_width=self.dense_width)

    def training(self) -> TrainingConfig:
        return TrainingConfig(beta=self.beta, batch_size=self.batch_size, steps=self.steps, lr=self.lr,
                              adam_beta1=self.adam_beta1, adam_beta2=self.adam_beta2, adam_eps=self.adam_eps,
                              seed=self.seed, instance_noise=self.instance_noise)

    @property
    def variant(self) -> str:
        return variant_name(self.beta, self.style_enabled, self.latent_spec())

    def outlier_index(self) -> int:
        return D.SHAPES.index(self.outlier_shape)

    def split_rules(self):
        k = self.outlier_index()
        return (lambda f: f[:, 0] != k), (lambda f: f[:, 0] == k)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})

    # text form

    def to_text(self) -> str:
        lines = [f"# resolved configuration ({self.variant})"]
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "factor":
                lines.extend(f"factor = {spec.format()}" for spec in value)
            else:
                lines.append(f"{f.name} = {_format(value)}")
        return "\n".join(lines) + "\n"

    def write(self, directory) -> Path:
        path = Path(directory) / RESOLVED_NAME
        path.write_text(self.to_text())
        return path


def _format(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False, "on": True, "off": False}


def _coerce(name: str, raw: str, default):
    try:
        if name == "gamma":
            return None if raw.lower() == "auto" else float(raw)
        if isinstance(default, bool):
            if raw.lower() not in _BOOL:
                raise ValueError(f"expected true/false, got {raw!r}")
            return _BOOL[raw.lower()]
        if isinstance(default, int):
            return int(raw, 0)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    defaults = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    values, factors = {}, []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key == "factor":
            try:
                factors.append(FactorSpec.parse(raw))
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: {exc}") from exc
            continue
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw, getattr(defaults, key))
    if factors:
        values["factor"] = tuple(factors)
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))


def sweep_base_seed(config: RunConfig) -> int:
    """Seed for the fixed latent draws shared by all sample and sweep grids of a run."""
    return int(np.random.SeedSequence([config.seed, 0x5EED]).generate_state(1)[0])
