"""Run configuration: one JSON document, fully validated up front."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .artifacts import config_hash


class ConfigError(ValueError):
    pass


@dataclass
class Stage1Config:
    confidence_floor: float = 0.5
    recognizer: str = "glyph-oracle"


@dataclass
class Stage2Config:
    epochs: int = 10
    lr: float = 1e-3
    samples_per_epoch: int = 8
    grad_clip: float | None = 1.0
    chunk_size: int = 512


@dataclass
class Stage3Config:
    epochs: int = 20
    lr: float = 1e-6
    batch_size: int = 4
    grad_clip: float | None = 1.0


@dataclass
class ScheduleConfig:
    kind: str = "cosine"
    n_steps: int = 1000


@dataclass
class PretrainConfig:
    n_images: int = 3000
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0


@dataclass
class BackendConfig:
    kind: str = "toy"
    checkpoint: str | None = None
    width: int = 32
    image_size: int = 16
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)


@dataclass
class EncoderConfig:
    kind: str = "hash"
    n_tokens: int = 8
    d_text: int = 32


@dataclass
class EvalConfig:
    n_infer_steps: int = 50
    n_samples: int | None = None
    patch_size: int = 16
    extractor: str = "downsample"
    grid: int = 4
    kid_subset_size: int = 100
    kid_subsets: int = 100


@dataclass
class RunConfig:
    dataset_dir: str = "dataset"
    gesture_id: str = "phone call"
    lambda_: float = 0.7
    mu: float | None = None
    feature_fusion: bool = True
    embedding_optimization: bool = True
    train_size: int | None = None
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    stage3: Stage3Config = field(default_factory=Stage3Config)
    backend: BackendConfig = field(default_factory=BackendConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    run_dir: str = "runs"
    log_level: str = "INFO"

    def __post_init__(self) -> None:
        self.validate()

    @property
    def mu_infer(self) -> float:
        return self.lambda_ if self.mu is None else self.mu

    def validate(self) -> None:
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        need(0.0 <= self.lambda_ <= 1.0, f"lambda={self.lambda_} outside [0, 1]")
        need(0.0 <= self.mu_infer <= 1.0, f"mu={self.mu} outside [0, 1]")
        need(self.stage2.epochs >= 0 and self.stage3.epochs >= 0, "epochs must be >= 0")
        need(self.stage2.lr > 0 and self.stage3.lr > 0, "learning rates must be > 0")
        need(self.stage2.samples_per_epoch >= 1, "stage2.samples_per_epoch must be >= 1")
        need(self.stage3.batch_size >= 1, "stage3.batch_size must be >= 1")
        need(self.train_size is None or self.train_size >= 1, "train_size must be >= 1")
        need(self.backend.kind == "toy", f"unsupported backend kind {self.backend.kind!r} for training")
        need(self.backend.schedule.kind in ("cosine", "linear-beta"), f"unknown schedule {self.backend.schedule.kind!r}")
        need(self.encoder.kind in ("hash", "remote"), f"unknown encoder {self.encoder.kind!r}")
        need(self.stage1.recognizer in ("glyph-oracle", "remote"), f"unknown recognizer {self.stage1.recognizer!r}")
        need(self.eval.extractor in ("downsample", "identity", "remote"), f"unknown extractor {self.eval.extractor!r}")
        need(0.0 <= self.stage1.confidence_floor <= 1.0, "confidence_floor outside [0, 1]")
        need(self.log_level.upper() in ("DEBUG", "INFO", "WARNING", "ERROR"), f"bad log_level {self.log_level!r}")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lambda_")
        return d

    def digest(self) -> str:
        return config_hash(self.to_dict())

    def replace(self, **changes: Any) -> "RunConfig":
        return from_dict(_deep_update(self.to_dict(), changes))


def _deep_update(base: dict, changes: Mapping[str, Any]) -> dict:
    out = dict(base)
    for k, v in changes.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = v
    return out


def _build(cls, data: Mapping[str, Any], path: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    aliases = {"lambda": "lambda_"}
    kwargs = {}
    for key, value in data.items():
        name = aliases.get(key, key)
        if name not in fields:
            raise ConfigError(f"unknown config key {path + key!r}")
        sub = fields[name].default_factory if fields[name].default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, value, f"{path}{key}.")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def from_dict(data: Mapping[str, Any]) -> RunConfig:
    return _build(RunConfig, data, "")


def load_config(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return from_dict(_deep_update(data, overrides or {}))


def toy_config(**changes: Any) -> RunConfig:
    """Desk-scale preset: default epochs and Stage II rate; Stage III rate scaled for the toy backend."""
    base = {
        "stage2": {"epochs": 10, "lr": 1e-3, "samples_per_epoch": 8},
        "stage3": {"epochs": 20, "lr": 1e-3, "batch_size": 4},
        "backend": {"schedule": {"kind": "cosine", "n_steps": 1000}},
        "eval": {"n_infer_steps": 50},
    }
    return from_dict(_deep_update(base, changes))
