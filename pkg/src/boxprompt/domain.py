"""Core value types shared across the package."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np
import torch

TRANSFORM_KINDS = ("identity", "rot90", "rot180", "rot270", "hflip", "vflip", "translate", "scale")
PENALTY_KINDS = ("relu", "logbarrier")


class ConfigError(ValueError):
    """Raised when a TrainConfig violates one of its invariants."""


@dataclass(frozen=True)
class BoxAnnotation:
    """Axis-aligned box with inclusive integer corners; x is the column, y the row."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max"):
            v = getattr(self, name)
            if int(v) != v:
                raise ValueError(f"{name} must be an integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if self.x_min < 0 or self.y_min < 0:
            raise ValueError(f"negative box corner: {self}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"box corners out of order: {self}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min + 1

    @property
    def height(self) -> int:
        return self.y_max - self.y_min + 1

    @property
    def area(self) -> int:
        return self.width * self.height

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def fits(self, height: int, width: int) -> bool:
        return self.x_max <= width - 1 and self.y_max <= height - 1

    def check_fits(self, height: int, width: int) -> None:
        if not self.fits(height, width):
            raise ValueError(f"box {self.as_tuple()} outside a {height}x{width} image")


@dataclass(frozen=True)
class Image:
    """A channels x H x W float32 image, normally 3 channels in [0, 255]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim == 2:
            px = np.repeat(px[None], 3, axis=0)
        if px.ndim != 3:
            raise ValueError(f"image must be CxHxW, got shape {px.shape}")
        if px.shape[1] < 16 or px.shape[2] < 16:
            raise ValueError(f"image must be at least 16x16, got {px.shape[1:]}")
        if not np.all(np.isfinite(px)):
            raise ValueError("image contains non-finite values")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[2]


@dataclass(frozen=True)
class RegionPartition:
    """Inside/outside indicators of a box on an H x W grid."""

    inside: np.ndarray
    outside: np.ndarray
    inside_area: int


class PromptEmbedding(NamedTuple):
    """Dense (C_e x H_e x W_e) and sparse (C_e) prompt embeddings.

    A leading batch axis is allowed on both parts.
    """

    dense: torch.Tensor
    sparse: torch.Tensor


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 0.01
    lambda3: float = 0.001
    lambda4: float = 0.001
    alpha: float = 1.0
    beta: float = 1.0
    eps1: float = 0.7
    eps2: float = 0.9
    barrier_t0: float = 5.0
    barrier_factor: float = 1.1
    barrier_every_epochs: int = 5
    penalty_kind: str = "logbarrier"
    lr: float = 1e-4
    lr_drop_epoch: int | None = None
    weight_decay: float = 1e-4
    batch_size: int = 4
    epochs: int = 200
    seed: int = 0
    transform_set: tuple[str, ...] = ("rot90", "rot180", "rot270", "hflip", "vflip")
    max_translate: float = 0.1
    scale_range: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        object.__setattr__(self, "transform_set", tuple(self.transform_set))
        object.__setattr__(self, "scale_range", tuple(float(s) for s in self.scale_range))

    @property
    def lambdas(self) -> tuple[float, float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    @property
    def effective_lr_drop_epoch(self) -> int:
        return self.epochs // 2 if self.lr_drop_epoch is None else self.lr_drop_epoch

    def replace(self, **changes) -> "TrainConfig":
        d = asdict(self)
        d.update(changes)
        return TrainConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["transform_set"] = list(self.transform_set)
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)


def validate_config(cfg: TrainConfig) -> None:
    """Raise ConfigError listing every violated invariant of ``cfg``."""
    problems = []
    for name, v in zip(("lambda1", "lambda2", "lambda3", "lambda4"), cfg.lambdas):
        if v < 0:
            problems.append(f"negative loss weight {name}={v}")
    for name in ("alpha", "beta", "weight_decay"):
        if getattr(cfg, name) < 0:
            problems.append(f"{name} must be nonnegative")
    for name in ("eps1", "eps2"):
        v = getattr(cfg, name)
        if not 0.0 <= v <= 1.0:
            problems.append(f"{name}={v} outside [0, 1]")
    if cfg.eps1 > cfg.eps2:
        problems.append("eps1 > eps2")
    if cfg.barrier_t0 <= 0:
        problems.append("barrier_t0 must be positive")
    if cfg.barrier_factor <= 0:
        problems.append("barrier_factor must be positive")
    if cfg.barrier_every_epochs < 1:
        problems.append("barrier_every_epochs must be a positive integer")
    if cfg.penalty_kind not in PENALTY_KINDS:
        problems.append(f"penalty_kind must be one of {PENALTY_KINDS}")
    if cfg.lr <= 0:
        problems.append("lr must be positive")
    if cfg.batch_size < 1:
        problems.append("batch_size must be a positive integer")
    if cfg.epochs < 0:
        problems.append("epochs must be nonnegative")
    if cfg.lr_drop_epoch is not None and not 0 <= cfg.lr_drop_epoch <= cfg.epochs:
        problems.append("lr_drop_epoch must lie in [0, epochs]")
    if not cfg.transform_set:
        problems.append("transform_set is empty")
    bad = [k for k in cfg.transform_set if k not in TRANSFORM_KINDS]
    if bad:
        problems.append(f"unknown transform kinds: {bad}")
    if cfg.max_translate < 0:
        problems.append("max_translate must be nonnegative")
    lo, hi = cfg.scale_range
    if not 0 < lo <= hi:
        problems.append("scale_range must satisfy 0 < low <= high")
    if problems:
        raise ConfigError("; ".join(problems))
