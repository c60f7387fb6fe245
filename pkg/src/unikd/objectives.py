"""Rendering, uncertainty-weighted supervised, and distillation losses."""
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, UsageError


@dataclass(frozen=True)
class LossConfig:
    eta: float = 5.0
    beta_min: float = 0.01
    reduction: str = "mean"

    def __post_init__(self):
        if self.eta < 0:
            raise ConfigError("eta", "must be >= 0")
        if self.beta_min <= 0:
            raise ConfigError("beta_min", "must be > 0")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError("reduction", "must be 'mean' or 'sum'")


def _reduce(per_ray, reduction):
    return dc.mean(per_ray) if reduction == "mean" else dc.sum(per_ray)


def _sq_err(pred, target):
    pred = dc.as_tensor(pred)
    if isinstance(target, dc.Tensor):
        if target.requires_grad:
            raise UsageError("loss target must not carry gradients")
        target = target.values
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise UsageError(f"prediction/target count mismatch: {pred.shape} vs {target.shape}")
    return dc.sum(dc.square(dc.sub(pred, target)), axis=-1)


def rgb_loss(pred, gt, reduction="mean"):
    """Plain rendering loss: squared color error per ray, reduced over rays."""
    return _reduce(_sq_err(pred, gt), reduction)


def uncertainty_weighted_loss(color, beta, target, cfg):
    """Per-ray ``e^2/2 + e^2/(2 beta^2) + log(beta) + eta`` with ``e = |target - color|``.

    ``target`` is detached by construction. Shared by the supervised and the
    distillation objectives, which differ only in where the target comes from.
    """
    beta = dc.as_tensor(beta)
    if np.any(beta.values < cfg.beta_min * (1 - 1e-12)):
        raise AssertionError("composited uncertainty fell below beta_min")
    e2 = _sq_err(color, target)
    weighted = dc.div(e2, dc.scale_add(dc.square(beta), alpha=2.0))
    per_ray = dc.add(dc.add(dc.scale_add(e2, alpha=0.5), weighted), dc.scale_add(dc.log(beta), cfg.eta))
    return _reduce(per_ray, cfg.reduction)


def supervised_loss(pred, gt, cfg):
    """Uncertainty-weighted loss against ground-truth colors."""
    return uncertainty_weighted_loss(pred.color, pred.beta, gt, cfg)


def distill_loss(student, teacher_colors, cfg):
    """Uncertainty-weighted loss against a frozen teacher's rendered colors.

    Only the student's color and uncertainty receive gradients.
    """
    if isinstance(teacher_colors, dc.Tensor) and teacher_colors.requires_grad:
        raise UsageError("teacher colors must be rendered without gradients")
    return uncertainty_weighted_loss(student.color, student.beta, teacher_colors, cfg)
