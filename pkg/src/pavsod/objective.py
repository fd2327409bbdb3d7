"""Training losses (structure, distillation, total) and saliency metrics (MAE, adaptive F_β)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, ops, stop_gradient

BETA2 = 0.3


@dataclass(frozen=True)
class LossWeights:
    lambda_distill: float = 5.0
    lambda_dice: float = 1.0

    def __post_init__(self):
        if self.lambda_distill < 0 or self.lambda_dice < 0:
            raise ValueError("loss weights must be non-negative")


def bce_loss(logits: Tensor, gt) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 targets (fused, log-safe)."""
    return ops.bce_with_logits(logits, np.asarray(getattr(gt, "data", gt))).mean()


def dice_loss(pred: Tensor, gt, eps: float = 1.0) -> Tensor:
    """``1 − (2Σpg + eps)/(Σp + Σg + eps)`` per frame (leading axis), averaged over frames."""
    g = Tensor(np.asarray(getattr(gt, "data", gt)), dtype=pred.dtype)
    if pred.shape != g.shape:
        raise ValueError(f"prediction {pred.shape} and mask {g.shape} shapes differ")
    axes = tuple(range(1, pred.ndim))
    inter = ops.sum(pred * g, axis=axes)
    denom = ops.sum(pred, axis=axes) + ops.sum(g, axis=axes) + eps
    return (1.0 - (2.0 * inter + eps) / denom).mean()


def structure_loss(logits: Tensor, gt, lambda_dice: float = 1.0) -> Tensor:
    """``Σ_t bce_t + λ_dice Σ_t dice_t`` over T×1×H×W logits and masks."""
    g = np.asarray(getattr(gt, "data", gt))
    if logits.shape[0] != g.shape[0]:
        raise ValueError(f"{logits.shape[0]} predicted frames vs {g.shape[0]} ground-truth frames")
    total = None
    for t in range(logits.shape[0]):
        lt = logits[t:t + 1]
        term = bce_loss(lt, g[t:t + 1])
        if lambda_dice:
            term = term + lambda_dice * dice_loss(ops.sigmoid(lt), g[t:t + 1])
        total = term if total is None else total + term
    return total


def distill_loss(f_stu: Tensor, f_tch: Tensor) -> Tensor:
    """``Σ_t mean((f_stu − sg(f_tch))²)``; the teacher side is the fixed target."""
    if f_stu.shape != f_tch.shape:
        raise ValueError(f"student {f_stu.shape} and teacher {f_tch.shape} shapes differ")
    d = f_stu - stop_gradient(f_tch)
    per_frame = ops.mean(d * d, axis=tuple(range(1, d.ndim)))
    return ops.sum(per_frame)


@dataclass(frozen=True)
class LossReport:
    l_struc_stu: float
    l_struc_tch: float
    l_distill: float
    total: float


def combine_losses(l_stu: Tensor, l_tch: Tensor | None, l_distill: Tensor | None,
                   weights: LossWeights) -> tuple[Tensor, LossReport]:
    """Differentiable ``L_stu + L_tch + λ_distill·L_distill`` and its float report.

    Missing terms count as zero.
    """
    vals = [float(l_stu.data),
            0.0 if l_tch is None else float(l_tch.data),
            0.0 if l_distill is None else float(l_distill.data)]
    for name, v in zip(("student structure", "teacher structure", "distillation"), vals):
        if not math.isfinite(v):
            raise FloatingPointError(f"{name} loss is not finite ({v})")
    total = l_stu
    if l_tch is not None:
        total = total + l_tch
    if l_distill is not None and weights.lambda_distill:
        total = total + weights.lambda_distill * l_distill
    return total, total_loss(vals[0], vals[1], vals[2], weights)


def total_loss(l_stu: float, l_tch: float, l_distill: float, weights: LossWeights = LossWeights()) -> LossReport:
    for v in (l_stu, l_tch, l_distill):
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite loss component {v}")
    total = (l_stu + l_tch) + weights.lambda_distill * l_distill
    return LossReport(l_stu, l_tch, l_distill, total)


def mae(pred, gt) -> float:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and mask {g.shape} shapes differ")
    return float(np.mean(np.abs(p - g)))


def adaptive_fbeta(pred, gt, beta2: float = BETA2) -> float | None:
    """F_β at threshold ``min(2·mean(pred), 1)``; ``None`` for an empty mask."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt) > 0.5
    if not g.any():
        return None
    thr = min(2.0 * float(p.mean()), 1.0)
    # an all-zero map has nothing above its (zero) threshold
    binary = p >= thr if thr > 0 else p > 0
    tp = float(np.logical_and(binary, g).sum())
    n_pos = float(binary.sum())
    precision = tp / n_pos if n_pos else 0.0
    recall = tp / float(g.sum())
    if precision == 0.0 and recall == 0.0:
        return 0.0
    return (1 + beta2) * precision * recall / (beta2 * precision + recall)
