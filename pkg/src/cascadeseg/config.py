"""Run configuration: every tunable of a training/segmentation run in one place."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .losses import TARGETS_2D, TARGETS_3D, TargetWeights, check_coefficients
from .optim import OptimizerConfig
from .vote import Thresholds


@dataclass
class LossConfig:
    targets_3d: tuple[float, ...] = TARGETS_3D
    targets_2d: tuple[float, ...] = TARGETS_2D
    c_main: float = 0.75
    c_k: tuple[float, ...] = (0.05, 0.05, 0.05, 0.05, 0.05)

    def __post_init__(self):
        self.targets_3d = TargetWeights(tuple(self.targets_3d)).t
        self.targets_2d = TargetWeights(tuple(self.targets_2d)).t
        self.c_k = tuple(float(c) for c in self.c_k)
        check_coefficients(self.c_main, self.c_k)


@dataclass
class EnsembleConfig:
    t_tumor: float = 0.4
    t_core: float = 0.3
    t_enhancing: float = 0.4
    inclusive: bool = True

    def __post_init__(self):
        self.thresholds()

    def thresholds(self) -> Thresholds:
        return Thresholds(self.t_tumor, self.t_core, self.t_enhancing, self.inclusive)


@dataclass
class PipelineConfig:
    patch: tuple[int, int, int] = (16, 16, 16)
    normalization_constant: float = 1.0
    balanced_sampling: bool = False

    def __post_init__(self):
        self.patch = tuple(int(p) for p in self.patch)
        if len(self.patch) != 3 or min(self.patch) < 1:
            raise ValueError(f"patch must be three positive extents, got {self.patch}")
        if self.normalization_constant <= 0:
            raise ValueError("normalization constant must be positive")


@dataclass
class TrainConfig:
    iterations_2d: int = 2000
    iterations_3d: int = 1000
    slices_per_batch: int = 4
    patches_per_batch: int = 1
    pretrain_iterations: int = 500
    monitor_fraction: float = 0.2
    monitor_every: int = 50

    def __post_init__(self):
        if not 0.0 <= self.monitor_fraction < 1.0:
            raise ValueError("monitor_fraction must lie in [0, 1)")
        for name in ("iterations_2d", "iterations_3d", "slices_per_batch", "patches_per_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class RunConfig:
    architecture_2d: str = "2d_model1"
    architecture_3d: str = "3d_standard"
    optimizer_2d: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(n_batches=10))
    optimizer_3d: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(n_batches=5))
    loss: LossConfig = field(default_factory=LossConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        def plain(v):
            if isinstance(v, tuple):
                return list(v)
            if isinstance(v, dict):
                return {k: plain(x) for k, x in v.items()}
            return v
        return plain(dataclasses.asdict(self))


_NESTED = {
    "optimizer_2d": OptimizerConfig, "optimizer_3d": OptimizerConfig, "loss": LossConfig,
    "ensemble": EnsembleConfig, "pipeline": PipelineConfig, "train": TrainConfig,
}


def from_dict(d: dict | None) -> RunConfig:
    d = dict(d or {})
    unknown = set(d) - {f.name for f in dataclasses.fields(RunConfig)}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for k, v in d.items():
        if k in _NESTED:
            base = dataclasses.asdict(RunConfig().__getattribute__(k))
            base.update(v or {})
            kwargs[k] = _NESTED[k](**base)
        else:
            kwargs[k] = v
    return RunConfig(**kwargs)


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as fh:
        return from_dict(yaml.safe_load(fh))


def save_run_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
