"""Dataclass configs plus the flat ``key = value`` config-file format.

A config file is INI-style with ``[model]``, ``[loss]``, ``[training]`` and
``[data]`` sections; every key maps onto a dataclass field of the same name.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .errors import ConfigError

LABELS = ("W", "N1", "N2", "N3", "REM")
MODALITIES = ("eeg", "eog")


class Fusion(str, Enum):
    UNIMODAL = "unimodal"
    EARLY = "early"
    MIDLATE = "midlate"
    CORE = "core"


@dataclass(frozen=True)
class ModelConfig:
    fusion: Fusion = Fusion.CORE
    n_features: int = 128  # D, STFT bins per frame
    n_frames: int = 29  # T, frames per 30 s window
    max_windows: int = 21  # L, outer sequence length
    d_model: int = 128
    n_heads: int = 8
    d_k: int = 16
    d_u: int = 128
    d_ff: int = 1024
    inner_layers: int = 4
    outer_layers: int = 4
    n_classes: int = 5
    dropout: float = 0.3
    ln_eps: float = 1e-5
    share_predictors: bool = False
    modality: str = "eeg"  # only read by the unimodal variant
    precision: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "fusion", Fusion(self.fusion))
        for name in ("n_features", "n_frames", "max_windows", "d_model", "n_heads", "d_k", "d_u", "d_ff"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive")
        if self.inner_layers < 1 or self.outer_layers < 1:
            raise ConfigError("model needs at least one inner and one outer layer")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("model.dropout must lie in [0, 1)")
        if self.modality not in MODALITIES:
            raise ConfigError(f"model.modality must be one of {MODALITIES}")
        if self.precision not in ("float64", "float32"):
            raise ConfigError("model.precision must be float64 or float32")

    @property
    def torch_dtype(self):
        import torch

        return torch.float64 if self.precision == "float64" else torch.float32

    @classmethod
    def reduced(cls, **overrides) -> "ModelConfig":
        """Desk-scale width/depth; sequence geometry is unchanged."""
        base = dict(d_model=16, n_heads=2, d_k=8, d_u=8, d_ff=32, inner_layers=2, outer_layers=2, dropout=0.1)
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class LossConfig:
    lambda_a: float = 0.1
    ms_enabled: bool = True
    al_enabled: bool = True
    al_normalize: bool = True
    al_source: str = "outer"  # "outer" states per window, or the inner "cls" summary

    def __post_init__(self):
        if self.lambda_a < 0:
            raise ConfigError("loss.lambda_a must be non-negative")
        if self.al_source not in ("outer", "cls"):
            raise ConfigError("loss.al_source must be 'outer' or 'cls'")


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-4
    max_lr: float = 0.03
    peak_is_max_lr: bool = False  # use max_lr instead of base_lr as the schedule peak
    weight_decay: float = 1e-4
    batch_size: int = 16
    span: int = 21
    warmup_steps: int = 20_000
    validate_every: int = 400
    patience_steps: int = 100_000
    max_steps: int = 1_000_000
    scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.span < 1:
            raise ConfigError("training.batch_size and training.span must be positive")
        if self.max_steps < 1 or self.scale <= 0:
            raise ConfigError("training.max_steps and training.scale must be positive")
        if self.scaled_validate_every > self.scaled_patience:
            raise ConfigError("training.validate_every must not exceed training.patience_steps")

    @property
    def peak_lr(self) -> float:
        return self.max_lr if self.peak_is_max_lr else self.base_lr

    @property
    def scaled_warmup(self) -> int:
        return max(0, round(self.warmup_steps * self.scale))

    @property
    def scaled_validate_every(self) -> int:
        return max(1, round(self.validate_every * self.scale))

    @property
    def scaled_patience(self) -> int:
        return max(1, round(self.patience_steps * self.scale))


@dataclass(frozen=True)
class DataConfig:
    n_patients: int = 200
    windows_per_patient: int = 100
    noise_chunk_s: float = 600.0
    noise_patient_threshold: float = 0.4
    noise_factor: float = 5.0
    noise_reference_quantile: float = 0.1


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return {
            name: {k: (v.value if isinstance(v, Enum) else v) for k, v in dataclasses.asdict(getattr(self, name)).items()}
            for name in ("model", "loss", "training", "data")
        }

    def digest(self) -> str:
        """Hash of everything that shapes the parameters or the optimisation trajectory."""
        d = self.to_dict()
        d.pop("data")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


_SECTIONS = {"model": ModelConfig, "loss": LossConfig, "training": TrainConfig, "data": DataConfig}


def _coerce(cls, key: str, raw: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if key not in fields:
        raise ConfigError(f"unknown config key {cls.__name__}.{key}")
    default = fields[key].default
    if isinstance(default, bool):
        lowered = raw.strip().lower()
        if lowered not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        return lowered in ("true", "1", "yes")
    if isinstance(default, Enum):
        return type(default)(raw.strip())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


def load_config(path: str | Path | None = None, **section_overrides) -> RunConfig:
    """Read a config file; missing sections and keys keep their defaults."""
    values: dict[str, dict] = {name: {} for name in _SECTIONS}
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                values[section][key] = _coerce(_SECTIONS[section], key, raw)
    for section, extra in section_overrides.items():
        values[section].update(extra)
    try:
        return RunConfig(**{name: cls(**values[name]) for name, cls in _SECTIONS.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {v}" for k, v in values.items()]
        lines.append("")
    return "\n".join(lines)
