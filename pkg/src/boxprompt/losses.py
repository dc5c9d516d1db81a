"""Box-supervised loss terms.

All losses reduce over the last two (spatial) axes, so a batch of maps gives
a vector of per-sample values and a single H x W map gives a scalar.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .domain import PENALTY_KINDS, RegionPartition

PROB_FLOOR = 1e-7
DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class PenaltyFunction:
    kind: str = "logbarrier"
    t: float = 5.0

    def __post_init__(self):
        if self.kind not in PENALTY_KINDS:
            raise ValueError(f"unknown penalty kind {self.kind!r}")
        if self.t <= 0:
            raise ValueError("t must be positive")

    def __call__(self, z):
        return penalty(z, self)


@dataclass(frozen=True)
class LossBreakdown:
    pseudo: float
    size: float
    empty: float
    cons: float
    total: float

    def as_dict(self) -> dict:
        return {"pseudo": self.pseudo, "size": self.size, "empty": self.empty,
                "cons": self.cons, "total": self.total}


def penalty(z, p: PenaltyFunction):
    """Soft inequality penalty for the constraint ``z <= 0``.

    ``relu`` is ``max(0, z)``. ``logbarrier`` is the extended log-barrier:
    ``-log(-z) / t`` for ``z <= -1/t**2`` and its linear continuation
    ``t*z - log(1/t**2)/t + 1/t`` above that point.
    """
    z = torch.as_tensor(z, dtype=torch.get_default_dtype()) if not torch.is_tensor(z) else z
    if p.kind == "relu":
        return torch.clamp(z, min=0)
    t = p.t
    junction = -1.0 / t ** 2
    in_log = z <= junction
    # keep the unused branch finite so autograd never sees nan
    safe = torch.where(in_log, -z, torch.ones_like(z))
    log_branch = -torch.log(safe) / t
    lin_branch = t * z - math.log(1.0 / t ** 2) / t + 1.0 / t
    return torch.where(in_log, log_branch, lin_branch)


def barrier_schedule(epoch: int, t0: float, factor: float, every: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    return t0 * factor ** (epoch // every)


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _as_target(x, like):
    return torch.as_tensor(x, dtype=like.dtype, device=like.device)


def pseudo_label_loss(pred, pseudo, alpha: float = 1.0, beta: float = 1.0, clamp: bool = True):
    """``alpha * mean BCE + beta * (1 - soft Dice)`` against a binary target."""
    pseudo = _as_target(pseudo, pred)
    _check_same_shape(pred, pseudo)
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be nonnegative")
    p = pred.clamp(PROB_FLOOR, 1 - PROB_FLOOR) if clamp else pred
    ce = -(torch.xlogy(pseudo, p) + torch.xlogy(1 - pseudo, 1 - p)).mean(dim=(-2, -1))
    inter = (pred * pseudo).sum(dim=(-2, -1))
    denom = pred.sum(dim=(-2, -1)) + pseudo.sum(dim=(-2, -1))
    dice = 1 - (2 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    return alpha * ce + beta * dice


def _inside_area(region, like):
    if isinstance(region, RegionPartition):
        return float(region.inside_area)
    return _as_target(region, like)


def size_loss(pred, region, eps1: float, eps2: float, p: PenaltyFunction):
    """Penalise total predicted foreground outside ``[eps1, eps2] * |inside|``.

    ``region`` is a RegionPartition or the inside area(s) directly.
    """
    if eps1 > eps2:
        raise ValueError("eps1 > eps2")
    area = _inside_area(region, pred)
    total = pred.sum(dim=(-2, -1))
    return penalty(eps1 * area - total, p) + penalty(total - eps2 * area, p)


def emptiness_loss(pred, region):
    """Summed ``-log(1 - p)`` over the pixels outside the box.

    ``region`` is a RegionPartition or an outside indicator broadcastable to ``pred``.
    """
    outside = region.outside if isinstance(region, RegionPartition) else region
    outside = _as_target(outside, pred)
    if outside.shape[-2:] != pred.shape[-2:]:
        raise ValueError("outside mask does not match prediction")
    p = pred.clamp(PROB_FLOOR, 1 - PROB_FLOOR)
    return -(outside * torch.log1p(-p)).sum(dim=(-2, -1))


def consistency_loss(pred_transformed_path, transformed_pred):
    """Summed squared difference between the two maps."""
    _check_same_shape(pred_transformed_path, transformed_pred)
    return ((pred_transformed_path - transformed_pred) ** 2).sum(dim=(-2, -1))


def total_loss(components, lambdas) -> tuple[torch.Tensor, LossBreakdown]:
    """Weighted sum of the four loss terms.

    ``components`` is ``(pseudo, size, empty, cons)`` as scalars or 0-d
    tensors. Returns the differentiable total and a float breakdown.
    """
    if len(components) != 4 or len(lambdas) != 4:
        raise ValueError("need four components and four weights")
    if any(l < 0 for l in lambdas):
        raise ValueError("loss weights must be nonnegative")
    c = [x if torch.is_tensor(x) else torch.tensor(float(x), dtype=torch.float64) for x in components]
    # switched-off terms are skipped rather than multiplied by 0 (0 * inf = nan)
    total = torch.zeros_like(c[0])
    for lam, term in zip(lambdas, c):
        if lam != 0:
            total = total + lam * term
    br = LossBreakdown(*(float(x.detach()) for x in c), total=float(total.detach()))
    return total, br
