"""Run configuration: nested JSON with strict keys and dotted overrides.

Precedence, lowest first: built-in defaults, ``GEOWORLD_SEED`` environment
variable, config file, ``--set key=value`` overrides.
"""
from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .objective import LossWeights
from .pretrain import PretrainConfig
from .teacher import TeacherConfig

METHODS = ("base", "ft_only", "static_teacher", "ours")
DEFAULT_SEEDS = (42, 43, 44, 45, 46)
SEED_ENV = "GEOWORLD_SEED"


class ConfigError(ValueError):
    pass


def default_dict() -> dict:
    return {
        "method": "ours",
        "seeds": list(DEFAULT_SEEDS),
        "epochs": 3,
        "batch_size": 8,
        "learning_rate": 1e-3,
        "weight_decay": 0.01,
        "grad_clip_norm": 1.0,
        "loss": {"lambda_align": 0.10, "lambda_preserve": 0.05},
        "align": {"per_token": False},
        "teacher": TeacherConfig().to_dict(),
        "pretrain": PretrainConfig().to_dict(),
        "data": {"train": "data/train.jsonl", "eval": "data/eval.jsonl",
                 "teacher_cache": "data/teacher_cache", "vlm_cache": "data/vlm_cache"},
    }


@dataclass(frozen=True)
class RunConfig:
    method: str = "ours"
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    epochs: int = 3
    batch_size: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    grad_clip_norm: float = 1.0
    loss: LossWeights = field(default_factory=LossWeights)
    per_token_align: bool = False
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    train_path: str = "data/train.jsonl"
    eval_path: str = "data/eval.jsonl"
    teacher_cache: str = "data/teacher_cache"
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    vlm_cache: str = "data/vlm_cache"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError(f"bad epochs/batch_size: {self.epochs}/{self.batch_size}")
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.grad_clip_norm < 0:
            raise ConfigError("learning_rate must be > 0; weight_decay and grad_clip_norm >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        d = merge(default_dict(), d)
        try:
            return cls(
                method=d["method"],
                seeds=tuple(int(s) for s in d["seeds"]),
                epochs=int(d["epochs"]),
                batch_size=int(d["batch_size"]),
                learning_rate=float(d["learning_rate"]),
                weight_decay=float(d["weight_decay"]),
                grad_clip_norm=float(d["grad_clip_norm"]),
                loss=LossWeights(float(d["loss"]["lambda_align"]), float(d["loss"]["lambda_preserve"])),
                per_token_align=bool(d["align"]["per_token"]),
                teacher=TeacherConfig.from_dict(d["teacher"]),
                train_path=str(d["data"]["train"]),
                eval_path=str(d["data"]["eval"]),
                teacher_cache=str(d["data"]["teacher_cache"]),
                pretrain=PretrainConfig.from_dict(d["pretrain"]),
                vlm_cache=str(d["data"]["vlm_cache"]),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seeds": list(self.seeds),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "grad_clip_norm": self.grad_clip_norm,
            "loss": {"lambda_align": self.loss.lambda_align, "lambda_preserve": self.loss.lambda_preserve},
            "align": {"per_token": self.per_token_align},
            "teacher": self.teacher.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "data": {"train": self.train_path, "eval": self.eval_path,
                     "teacher_cache": self.teacher_cache, "vlm_cache": self.vlm_cache},
        }

    def with_overrides(self, overrides: dict | list[str]) -> RunConfig:
        return RunConfig.from_dict(apply_overrides(self.to_dict(), overrides))


def merge(base: dict, update: dict, path: str = "") -> dict:
    """Recursive merge that rejects keys absent from ``base``."""
    out = copy.deepcopy(base)
    for key, value in update.items():
        dotted = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {dotted}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {dotted} must be an object")
            out[key] = merge(base[key], value, dotted + ".")
        else:
            out[key] = value
    return out


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides: dict | list[str]) -> dict:
    """Set dotted keys. ``overrides`` is a mapping or a list of ``key=value`` strings."""
    if not isinstance(overrides, dict):
        pairs = {}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must look like key=value: {item!r}")
            k, v = item.split("=", 1)
            pairs[k.strip()] = parse_value(v.strip())
        overrides = pairs
    nested: dict = {}
    for dotted, value in overrides.items():
        cur = nested
        parts = dotted.split(".")
        for p in parts[:-1]:
            cur = cur.setdefault(p, {})
        cur[parts[-1]] = value
    return merge(d, nested)


def load_config(path: str | Path | None = None, overrides=(), env=None) -> RunConfig:
    env = os.environ if env is None else env
    d = default_dict()
    if env.get(SEED_ENV):
        try:
            d["seeds"] = [int(env[SEED_ENV])]
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc
    if path is not None:
        try:
            d = merge(d, json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_dict(apply_overrides(d, overrides))
