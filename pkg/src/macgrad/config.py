"""Run configuration: validation, serialization, and shipped default profiles."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import yaml

from .curvature import OPTIMIZER_NAMES, OptimizerConfig
from .errors import ConfigError

__all__ = ["RunConfig", "OPTIMIZER_PROFILES", "load_config", "dump_config"]

# Per-optimizer defaults for desk-scale classification runs (CIFAR-style
# settings: lr 0.1, momentum 0.9, EMA 0.95, weight decay 5e-4, damping 1.0
# for the rank-1 methods and 0.03 for the full-factor ones, statistics every
# 5 steps, inverses every 50).
OPTIMIZER_PROFILES: dict[str, dict] = {
    "sgd": {"lr": 0.1, "momentum": 0.9, "weight_decay": 0.0005},
    "adamw": {"lr": 0.001, "momentum": 0.0, "weight_decay": 0.05},
    "mac": {"lr": 0.1, "momentum": 0.9, "ema_beta2": 0.95, "weight_decay": 0.0005,
            "damping": 1.0, "tau_cov": 5, "tau_inv": 50},
    "smac": {"lr": 0.1, "momentum": 0.9, "ema_beta2": 0.95, "weight_decay": 0.0005,
             "damping": 1.0, "tau_cov": 5, "tau_inv": 50},
    "kfac": {"lr": 0.1, "momentum": 0.9, "ema_beta2": 0.95, "weight_decay": 0.0005,
             "damping": 0.03, "tau_cov": 5, "tau_inv": 50},
    "foof": {"lr": 0.1, "momentum": 0.9, "ema_beta2": 0.95, "weight_decay": 0.0005,
             "damping": 1.0, "tau_cov": 5, "tau_inv": 50},
    "eva": {"lr": 0.1, "momentum": 0.9, "ema_beta2": 0.95, "weight_decay": 0.0005,
            "damping": 0.03, "tau_cov": 5, "tau_inv": 50},
}

_TOP_KEYS = {"model", "loss", "dataset", "test_dataset", "optimizer", "schedule",
             "seed", "out_dir"}
_SCHEDULE_KEYS = {"epochs", "batch_size", "lr_schedule"}
_LR_SCHEDULES = ("constant", "cosine")


@dataclass
class RunConfig:
    model: dict
    dataset: dict
    optimizer: OptimizerConfig
    loss: str = "cross_entropy"
    test_dataset: dict | None = None
    epochs: int = 1
    batch_size: int = 128
    lr_schedule: str = "constant"
    seed: int = 0
    out_dir: str | None = None

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        unknown = set(raw) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        for required in ("model", "dataset", "optimizer"):
            if required not in raw:
                raise ConfigError(f"config requires a {required!r} block")

        opt_raw = dict(raw["optimizer"])
        name = opt_raw.pop("name", None)
        if name not in OPTIMIZER_NAMES:
            raise ConfigError(f"optimizer.name must be one of {OPTIMIZER_NAMES}, got {name!r}")
        merged = dict(OPTIMIZER_PROFILES.get(name, {}))
        merged.update(opt_raw)
        allowed = {f.name for f in fields(OptimizerConfig)}
        unknown = set(merged) - allowed
        if unknown:
            raise ConfigError(f"unknown optimizer keys {sorted(unknown)}")
        optimizer = OptimizerConfig(name=name, **merged)
        optimizer.validate()

        schedule = dict(raw.get("schedule", {}))
        unknown = set(schedule) - _SCHEDULE_KEYS
        if unknown:
            raise ConfigError(f"unknown schedule keys {sorted(unknown)}")
        lr_schedule = schedule.get("lr_schedule", "constant")
        if lr_schedule not in _LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {_LR_SCHEDULES}")
        epochs = int(schedule.get("epochs", 1))
        if epochs < 0:
            raise ConfigError("epochs must be >= 0")
        batch_size = int(schedule.get("batch_size", 128))
        if batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

        loss = raw.get("loss", "cross_entropy")
        if loss not in ("cross_entropy", "squared"):
            raise ConfigError(f"unknown loss {loss!r}")

        return cls(
            model=dict(raw["model"]),
            dataset=dict(raw["dataset"]),
            test_dataset=dict(raw["test_dataset"]) if raw.get("test_dataset") else None,
            optimizer=optimizer,
            loss=loss,
            epochs=epochs,
            batch_size=batch_size,
            lr_schedule=lr_schedule,
            seed=int(raw.get("seed", 0)),
            out_dir=raw.get("out_dir"),
        )

    def to_dict(self) -> dict:
        opt = {f.name: getattr(self.optimizer, f.name) for f in fields(OptimizerConfig)}
        out = {
            "model": self.model,
            "loss": self.loss,
            "dataset": self.dataset,
            "optimizer": opt,
            "schedule": {
                "epochs": self.epochs,
                "batch_size": self.batch_size,
                "lr_schedule": self.lr_schedule,
            },
            "seed": self.seed,
        }
        if self.test_dataset is not None:
            out["test_dataset"] = self.test_dataset
        if self.out_dir is not None:
            out["out_dir"] = self.out_dir
        return out


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    return RunConfig.from_dict(raw)


def dump_config(config: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=True)
