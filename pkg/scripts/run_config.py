#!/usr/bin/env python3
"""
Run configuration: defaults <- JSON file (--config) <- command-line flags.

JSON layout mirrors the dataclass tree:

    {
      "network":   {"preset": "toy", "enable_msa": false, ...},
      "optimizer": {"lr": 0.001, "beta1": 0.9, "beta2": 0.999, "epsilon": 1e-8},
      "schedule":  {"epochs": 41, "lr_drop_epoch": 30, "lr_drop_factor": 0.1},
      "data":      {"train_manifest": "synth/manifest.json", "batch_size": 6, "seed": 0},
      "io":        {"out_dir": "runs", "log_path": null},
      "loss":      {"alpha_window": 31, "weight_lambda": null, "normalization": "alpha_sum"},
      "eval":      {"beta_squared": 0.3, "e_measure": "max", "per_image_f": false}
    }

Environment Variables:
- SODA_DETERMINISTIC: "1" turns deterministic mode on by default
"""

import dataclasses
import json
import logging
import os
import pathlib
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

from network_blocks import ConfigError, NetworkConfig, preset
from objectives import LossConfig
from saliency_metrics import E_MODES
from tensor_io import canonical_json

logger = logging.getLogger(__name__)

DETERMINISTIC_DEFAULT = os.environ.get("SODA_DETERMINISTIC", "0") == "1"


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class ScheduleConfig:
    epochs: int = 41
    lr_drop_epoch: int = 30
    lr_drop_factor: float = 0.1
    stats_refresh_batches: int = 16   # 0: keep the momentum-averaged batch-norm statistics


@dataclass
class DataConfig:
    train_manifest: Optional[str] = None
    batch_size: int = 6
    seed: int = 0
    steps_per_epoch: Optional[int] = None   # None: one pass over the manifest


@dataclass
class IOConfig:
    out_dir: str = "runs"
    log_path: Optional[str] = None


@dataclass
class EvalConfig:
    beta_squared: float = 0.3
    e_measure: str = "max"
    per_image_f: bool = False
    label: Optional[str] = None


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    io: IOConfig = field(default_factory=IOConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    deterministic: bool = DETERMINISTIC_DEFAULT

    def validate(self) -> "RunConfig":
        """Check every section; the raised ConfigError names the offending field."""
        self.network.validate()
        try:
            self.loss.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.optimizer.kind != "adam":
            raise ConfigError(f"optimizer.kind must be 'adam', got {self.optimizer.kind!r}")
        if self.optimizer.lr <= 0:
            raise ConfigError(f"optimizer.lr must be positive, got {self.optimizer.lr}")
        if not (0 <= self.optimizer.beta1 < 1 and 0 <= self.optimizer.beta2 < 1):
            raise ConfigError(f"optimizer betas must lie in [0, 1): {self.optimizer.beta1}, {self.optimizer.beta2}")
        if self.schedule.epochs < 1:
            raise ConfigError(f"schedule.epochs must be >= 1, got {self.schedule.epochs}")
        if self.schedule.lr_drop_epoch < 0:
            raise ConfigError(f"schedule.lr_drop_epoch must be >= 0, got {self.schedule.lr_drop_epoch}")
        if not 0 < self.schedule.lr_drop_factor <= 1:
            raise ConfigError(f"schedule.lr_drop_factor must lie in (0, 1], got {self.schedule.lr_drop_factor}")
        if self.schedule.stats_refresh_batches < 0:
            raise ConfigError(f"schedule.stats_refresh_batches must be >= 0, got {self.schedule.stats_refresh_batches}")
        if self.data.batch_size < 1:
            raise ConfigError(f"data.batch_size must be >= 1, got {self.data.batch_size}")
        if self.data.steps_per_epoch is not None and self.data.steps_per_epoch < 1:
            raise ConfigError(f"data.steps_per_epoch must be >= 1, got {self.data.steps_per_epoch}")
        if self.eval.e_measure not in E_MODES:
            raise ConfigError(f"eval.e_measure must be one of {E_MODES}, got {self.eval.e_measure!r}")
        if self.eval.beta_squared <= 0:
            raise ConfigError(f"eval.beta_squared must be positive, got {self.eval.beta_squared}")
        if not isinstance(self.deterministic, bool):
            raise ConfigError(f"deterministic must be true or false, got {self.deterministic!r}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        payload = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        for name, value in payload.items():
            if name == "network":
                payload[name] = value.to_dict()
            elif dataclasses.is_dataclass(value):
                payload[name] = dataclasses.asdict(value)
        return payload

    def to_json(self) -> str:
        return canonical_json(self.to_dict())


SECTIONS = {
    "optimizer": OptimizerConfig,
    "schedule": ScheduleConfig,
    "data": DataConfig,
    "io": IOConfig,
    "loss": LossConfig,
    "eval": EvalConfig,
}


def _section(cls, payload: Dict[str, Any], base, name: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"config section '{name}' must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"unknown keys in config section '{name}': {unknown}")
    return dataclasses.replace(base, **payload)


def _network(payload: Dict[str, Any], base: NetworkConfig) -> NetworkConfig:
    payload = dict(payload)
    if "preset" in payload:
        base = preset(payload.pop("preset"))
    merged = {**base.to_dict(), **payload}
    return NetworkConfig.from_dict(merged)


def merge(config: RunConfig, payload: Dict[str, Any]) -> RunConfig:
    """Overlay a (possibly partial) nested dict onto ``config``."""
    unknown = sorted(set(payload) - {f.name for f in dataclasses.fields(RunConfig)})
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {unknown}")
    updates: Dict[str, Any] = {}
    for name, value in payload.items():
        if name == "network":
            updates[name] = _network(value, config.network)
        elif name in SECTIONS:
            updates[name] = _section(SECTIONS[name], value, getattr(config, name), name)
        else:
            updates[name] = value
    return dataclasses.replace(config, **updates)


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    config_path = pathlib.Path(path)
    if not config_path.exists():
        raise ConfigError(f"config file not found: {config_path}")
    try:
        payload = json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {config_path} is not valid JSON: {e}") from e
    if not isinstance(payload, dict):
        raise ConfigError(f"config file {config_path} must hold a JSON object")
    return payload


def resolve_config(config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Defaults, then the JSON file, then flag overrides; validated before returning."""
    config = merge(RunConfig(), load_config_file(config_path))
    if overrides:
        config = merge(config, overrides)
    return config.validate()
