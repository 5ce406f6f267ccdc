"""Experiment configuration: presets, strict JSON loading, and snapshots.

A config is built in three layers: a preset (``desk`` or ``paper``), an
optional JSON file that overrides any subset of its keys, and CLI flags.
Keys the preset does not define are rejected at every nesting level.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..distillers import DistillConfig, DistillerKind
from ..errors import ConfigError
from ..network import NetworkSpec
from ..policy import TauSchedule
from ..trainer import SgdState, Strategy, TeacherMode
from .data import DatasetSpec

# Milestones as fractions of the run length (150/180/210 of 240 epochs).
MILESTONE_FRACTIONS = (5 / 8, 6 / 8, 7 / 8)


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple[int, ...] | None = None
    gamma: float = 0.1

    def resolved_milestones(self, epochs: int) -> tuple[int, ...]:
        if self.milestones is not None:
            return tuple(int(m) for m in self.milestones)
        return tuple(math.floor(f * epochs) for f in MILESTONE_FRACTIONS)

    def state(self, epochs: int) -> SgdState:
        return SgdState(self.lr, self.momentum, self.weight_decay, self.resolved_milestones(epochs), self.gamma)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 20
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    seed: int = 100


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str = "desk"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    teacher: NetworkSpec = field(default_factory=lambda: NetworkSpec.mlp(32, [128] * 4, 10))
    student: NetworkSpec = field(default_factory=lambda: NetworkSpec.mlp(32, [16] * 4, 10))
    distill: DistillConfig = field(default_factory=DistillConfig)
    strategy: Strategy = Strategy.ADAPTIVE
    tau: TauSchedule = field(default_factory=TauSchedule)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    epochs: int = 60
    batch_size: int = 32
    seed: int = 0
    teacher_mode: TeacherMode = TeacherMode.FROZEN
    teacher_checkpoint: str = "runs/teacher.ckpt.json"
    teacher_pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    adaption_init: str = "he"
    policy_init: str = "he"
    out_dir: str = "runs/experiment"

    def __post_init__(self):
        problems = []
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.seed < 0:
            problems.append("seed must be >= 0")
        if self.teacher.input_dim != self.dataset.input_dim and self.dataset.kind != "csv":
            problems.append("teacher input_dim differs from dataset input_dim")
        if self.student.input_dim != self.teacher.input_dim:
            problems.append("student and teacher input_dim differ")
        if self.dataset.kind != "csv" and self.teacher.classifier_dim != self.dataset.classes:
            problems.append("classifier_dim differs from dataset classes")
        if self.teacher.num_blocks != self.student.num_blocks:
            problems.append("teacher and student need the same number of blocks")
        if self.teacher_pretrain.epochs < 0 or self.teacher_pretrain.batch_size < 1:
            problems.append("teacher_pretrain epochs/batch_size out of range")
        if self.sgd.lr <= 0 or self.teacher_pretrain.lr <= 0:
            problems.append("learning rates must be positive")
        if problems:
            raise ConfigError("invalid experiment config: " + "; ".join(problems))
        self.dataset.validate()

    @property
    def num_spots(self) -> int:
        return self.teacher.num_blocks + 1

    def to_dict(self) -> dict:
        d = {
            "preset": self.preset,
            "dataset": asdict(self.dataset),
            "teacher": self.teacher.to_dict(),
            "student": self.student.to_dict(),
            "distill": {**asdict(self.distill), "kind": self.distill.kind.value},
            "strategy": Strategy(self.strategy).value,
            "tau": asdict(self.tau),
            "sgd": {**asdict(self.sgd), "milestones": list(self.sgd.resolved_milestones(self.epochs))},
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "teacher_mode": TeacherMode(self.teacher_mode).value,
            "teacher_checkpoint": self.teacher_checkpoint,
            "teacher_pretrain": asdict(self.teacher_pretrain),
            "adaption_init": self.adaption_init,
            "policy_init": self.policy_init,
            "out_dir": self.out_dir,
        }
        spots = d["distill"]["spots"]
        d["distill"]["spots"] = None if spots is None else list(spots)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        _check_keys(d, PRESETS["desk"], "")
        try:
            distill = dict(d["distill"])
            distill["kind"] = DistillerKind(distill["kind"])
            if distill.get("spots") is not None:
                distill["spots"] = tuple(distill["spots"])
            sgd = dict(d["sgd"])
            if sgd.get("milestones") is not None:
                sgd["milestones"] = tuple(sgd["milestones"])
            return cls(
                preset=d["preset"],
                dataset=DatasetSpec(**d["dataset"]),
                teacher=NetworkSpec.from_dict(d["teacher"]),
                student=NetworkSpec.from_dict(d["student"]),
                distill=DistillConfig(**distill),
                strategy=Strategy(d["strategy"]),
                tau=TauSchedule(**d["tau"]),
                sgd=SgdConfig(**sgd),
                epochs=int(d["epochs"]),
                batch_size=int(d["batch_size"]),
                seed=int(d["seed"]),
                teacher_mode=TeacherMode(d["teacher_mode"]),
                teacher_checkpoint=str(d["teacher_checkpoint"]),
                teacher_pretrain=PretrainConfig(**d["teacher_pretrain"]),
                adaption_init=d["adaption_init"],
                policy_init=d["policy_init"],
                out_dir=str(d["out_dir"]),
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config value: {exc}") from exc


def _check_keys(d, reference, path: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    unknown = sorted(set(d) - set(reference))
    if unknown:
        raise ConfigError(f"unknown config keys at {path or 'top level'}: {unknown}")
    for k, v in d.items():
        ref = reference[k]
        if isinstance(ref, dict) and k not in ("teacher", "student"):
            _check_keys(v, ref, f"{path}{k}.")


def _desk() -> dict:
    """Desk-scale benchmark: 10-class multi-cluster blobs, 4x128 teacher, 4x16 student, N = 4."""
    return ExperimentConfig(
        preset="desk",
        dataset=DatasetSpec(kind="blobs", classes=10, input_dim=32, samples_per_class=500, noise=1.0, center_scale=0.8, clusters_per_class=3, seed=0),
    ).to_dict()


def _paper() -> dict:
    """Training schedule as published (batch 64, 240 epochs, lr 0.05 decayed at 150/180/210)."""
    d = _desk()
    d.update(preset="paper", epochs=240, batch_size=64)
    d["sgd"] = {"lr": 0.05, "momentum": 0.9, "weight_decay": 5e-4, "milestones": [150, 180, 210], "gamma": 0.1}
    return d


PRESETS = {"desk": _desk(), "paper": _paper()}


def merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path}{k}")
        if isinstance(v, dict) and isinstance(base[k], dict) and k not in ("teacher", "student"):
            out[k] = merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, preset: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Preset, then the JSON file at ``path``, then ``overrides``."""
    d: dict = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config file must contain a JSON object")
    name = preset or d.get("preset", "desk")
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    merged = merge(PRESETS[name], d)
    merged["preset"] = name
    if overrides:
        merged = merge(merged, overrides)
    return ExperimentConfig.from_dict(merged)
