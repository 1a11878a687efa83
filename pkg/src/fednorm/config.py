"""Flat key = value experiment configuration.

Unknown keys are rejected outright so hyperparameter typos cannot pass
silently. Missing keys take the documented defaults (the federated
defaults are E=10, B=64, lr=0.01, m=10 over 100 devices, 5000 rounds).
"""

import os
from dataclasses import dataclass, field, fields

from . import norms


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "synthetic"
    data_dir: str = ""
    synthetic_samples: int = 22_000
    synthetic_test_samples: int = 2_000
    synthetic_classes: int = 10
    synthetic_shape: str = "3x16x16"
    synthetic_noise: float = 0.35
    # partition
    num_devices: int = 100
    classes_per_device: int = 2
    samples_per_class: int = 100
    # federated training
    devices_per_round: int = 10
    local_epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.01
    total_rounds: int = 5000
    eval_every: int = 10
    threads: int = 1
    # model / normalization
    model: str = "cnn"
    norm: str = "layer"
    group_count: int = 2
    norm_eps: float = 1e-5
    norm_momentum: float = 0.1
    # toy shift experiment
    delta: float = 0.5
    steps: int = 500
    probe_batch: int = 256
    # bookkeeping
    seed: int = 0
    out_dir: str = "fednorm_out"

    def norm_kind(self):
        return norms.parse_kind(self.norm, default_groups=self.group_count)

    def shape(self):
        dims = tuple(int(t) for t in self.synthetic_shape.lower().split("x"))
        if len(dims) != 3:
            raise ConfigError(f"synthetic_shape must be CxHxW, got {self.synthetic_shape!r}")
        return dims

    def resolved_data_dir(self):
        return self.data_dir or os.environ.get("FEDNORM_DATA_DIR", "")


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def parse_config(path):
    """Read a key = value file (one pair per line, # comments allowed)."""
    cfg = ExperimentConfig()
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, value = (t.strip() for t in line.split("=", 1))
            if key not in _FIELD_TYPES:
                valid = ", ".join(sorted(_FIELD_TYPES))
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}; valid keys: {valid}")
            try:
                setattr(cfg, key, _coerce(key, value))
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc
    validate(cfg)
    return cfg


def _coerce(key, value):
    target = _FIELD_TYPES[key]
    if target in ("int", int):
        return int(value)
    if target in ("float", float):
        return float(value)
    return value


def validate(cfg):
    if cfg.dataset not in ("synthetic", "cifar10", "mnist"):
        raise ConfigError(f"dataset must be synthetic, cifar10 or mnist, got {cfg.dataset!r}")
    if cfg.model not in ("cnn", "miniresnet"):
        raise ConfigError(f"model must be cnn or miniresnet, got {cfg.model!r}")
    try:
        cfg.norm_kind()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.devices_per_round > cfg.num_devices:
        raise ConfigError("devices_per_round exceeds num_devices")
    if cfg.local_epochs < 1 or cfg.learning_rate <= 0 or cfg.total_rounds < 1:
        raise ConfigError("local_epochs, learning_rate and total_rounds must be positive")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    cfg.shape()
    return cfg


def dump_config(cfg, path):
    """Resolved-config snapshot, itself parseable by parse_config."""
    with open(path, "w") as f:
        for fld in fields(ExperimentConfig):
            f.write(f"{fld.name} = {getattr(cfg, fld.name)}\n")
