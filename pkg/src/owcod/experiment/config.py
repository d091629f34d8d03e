"""Experiment configuration: one JSON document drives every subcommand."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from ..errors import ConfigError
from ..memory.retrieval import RetrievalConfig

LR_CANDIDATES = (1e-1, 4e-2, 1e-2, 1e-3, 1e-4)
EPOCH_CANDIDATES = tuple(range(1, 11))
MODES = ("decoupled", "joint")


@dataclass(frozen=True)
class TaskConfig:
    T: int = 6
    classes_per_subset: int = 3
    shots: int = 10
    eval_size: int = 12
    unseen_eval_size: int = 36
    n_pretrain_classes: int = 9
    n_unseen_classes: int = 9
    pretrain_images: int = 360
    image_size: int = 64
    max_instances: int = 3


@dataclass(frozen=True)
class PretrainConfig:
    iterations: int = 4000
    lr: float = 1e-3
    weight_decay: float = 1e-2
    ap_floor: float = 0.25        # pretrain-split AP the base must reach
    freeze_text: bool = True      # text tower stays at its seeded init
    sample_negatives: bool = True
    log_every: int = 50


@dataclass(frozen=True)
class ScheduleConfig:
    lr_candidates: tuple = LR_CANDIDATES
    epoch_candidates: tuple = EPOCH_CANDIDATES
    grid_search: bool = False
    lr: float = 1e-2              # used when grid search is off
    epochs: int = 4
    weight_decay: float = 1e-2
    batch_size: int = 1
    mode: str = "decoupled"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    detector: dict = field(default_factory=dict)   # DetectorConfig overrides; vocab comes from the task
    retrieval: RetrievalConfig = RetrievalConfig()
    task: TaskConfig = TaskConfig()
    pretrain: PretrainConfig = PretrainConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    n_crops: int = 8

    def __post_init__(self):
        s = self.schedule
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        if not s.lr_candidates or not s.epoch_candidates:
            raise ConfigError("learning-rate and epoch candidate lists must be non-empty")
        if any(not lr > 0 for lr in (*s.lr_candidates, s.lr)):
            raise ConfigError("learning rates must be positive")
        if any(int(e) != e or e < 1 for e in (*s.epoch_candidates, s.epochs)):
            raise ConfigError("epoch counts must be positive integers")
        if s.batch_size != 1:
            raise ConfigError(f"only batch size 1 is supported, got {s.batch_size}")
        if s.mode not in MODES:
            raise ConfigError(f"training mode must be one of {MODES}, got {s.mode!r}")
        if self.n_crops < 1:
            raise ConfigError("n_crops must be positive")
        if "vocab" in self.detector:
            raise ConfigError("detector.vocab is derived from the task and cannot be set")
        p = self.pretrain
        if p.iterations < 0 or not p.lr > 0 or not 0 <= p.ap_floor <= 1:
            raise ConfigError("pretrain needs iterations >= 0, lr > 0 and ap_floor in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"]["lr_candidates"] = list(self.schedule.lr_candidates)
        d["schedule"]["epoch_candidates"] = list(self.schedule.epoch_candidates)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        parts = {"retrieval": RetrievalConfig, "task": TaskConfig, "pretrain": PretrainConfig,
                 "schedule": ScheduleConfig}
        kw = {}
        for k, v in d.items():
            if k in parts:
                kw[k] = _section(parts[k], v, k)
            elif k in {f.name for f in fields(cls)}:
                kw[k] = v
            else:
                raise ConfigError(f"unknown config key {k!r}")
        if "detector" in kw and not isinstance(kw["detector"], dict):
            raise ConfigError("detector must be an object of DetectorConfig overrides")
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as f:
                d = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from None
        return cls.from_dict(d)

    def with_overrides(self, seed=None, tau=None, shots=None, mode=None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        if tau is not None:
            cfg = replace(cfg, retrieval=_section(RetrievalConfig, {**asdict(cfg.retrieval), "tau": tau}, "retrieval"))
        if shots is not None:
            cfg = replace(cfg, task=replace(cfg.task, shots=shots))
        if mode is not None:
            cfg = replace(cfg, schedule=replace(cfg.schedule, mode=mode))
        return cfg


def _section(kind, value, name):
    if not isinstance(value, dict):
        raise ConfigError(f"{name} must be an object")
    known = {f.name for f in fields(kind)}
    extra = sorted(set(value) - known)
    if extra:
        raise ConfigError(f"unknown key(s) in {name}: {', '.join(extra)}")
    value = {k: tuple(v) if isinstance(v, list) else v for k, v in value.items()}
    try:
        return kind(**value)
    except TypeError as e:
        raise ConfigError(f"{name}: {e}") from None
