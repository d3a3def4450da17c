"""Pixel cross-entropy, analytic Gaussian KL and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import LossUndefinedError, NumericError
from .head import IGNORE_INDEX, LatentDistribution
from .tensor import Tensor, add, check_finite, log, make_node, note_branch, stack, tsum

KL_WEIGHT = 0.005
PROB_CLAMP = 1e-12


def cross_entropy(probs: Tensor, labels: np.ndarray, ignore_mask: np.ndarray | None = None,
                  ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean of ``-ln p[label]`` over non-ignored pixels.

    ``probs`` is (C, H, W), or (T, C, H, W) in which case every slice is
    scored against the same labels and the mean runs over slices too.
    Probabilities are clamped to ``1e-12`` before the log.
    """
    labels = np.asarray(labels).astype(np.int64)
    valid = labels != ignore_index
    if ignore_mask is not None:
        valid &= ~np.asarray(ignore_mask, dtype=bool)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise LossUndefinedError("every pixel is ignored")
    p = probs.data if probs.ndim == 4 else probs.data[None]
    t, c = p.shape[:2]
    safe_labels = np.where(valid, labels, 0)
    rows, cols = np.nonzero(valid)
    picked = p[:, safe_labels[rows, cols], rows, cols]           # (T, n_valid)
    clamped = np.maximum(picked, PROB_CLAMP)
    note_branch(picked > PROB_CLAMP)
    denom = float(t * n_valid)
    value = -np.log(clamped).sum() / denom

    def backward(g):
        grad = np.zeros_like(p, dtype=np.result_type(p, g))
        local = np.where(picked > PROB_CLAMP, -1.0 / clamped, 0.0) * (g / denom)
        grad[:, safe_labels[rows, cols], rows, cols] = local
        return (grad if probs.ndim == 4 else grad[0],)

    return make_node(np.asarray(value, dtype=p.dtype), (probs,), backward)


def kl_gaussian(target: LatentDistribution, context: LatentDistribution) -> Tensor:
    """KL(target || context) for diagonal Gaussians holding variances."""
    ratio = target.var / context.var
    diff = context.mu - target.mu
    log_term = log(context.var) - log(target.var)
    d = float(target.dim)
    kl = 0.5 * add(tsum(log_term) + tsum(ratio) - d, tsum(diff * diff / context.var))
    return check_finite(kl, "KL divergence")


@dataclass
class LossBreakdown:
    l_c: float
    l_kl: float
    total: float
    pixel_count: int
    objective: Tensor | None = field(default=None, repr=False, compare=False)


def total_loss(l_c: Tensor, per_target_kls: Sequence[Tensor], kl_weight: float = KL_WEIGHT,
               pixel_count: int = 0) -> LossBreakdown:
    """``l_c + kl_weight * mean(KLs)``; an empty KL list counts as zero."""
    if per_target_kls:
        l_kl = tsum(_stack_scalars(per_target_kls)) * (1.0 / len(per_target_kls))
        objective = add(l_c, l_kl * kl_weight)
        kl_value = float(l_kl.data)
    else:
        objective = l_c
        kl_value = 0.0
    if not np.isfinite(objective.data):
        raise NumericError(f"non-finite loss (l_c={float(l_c.data)}, l_kl={kl_value})")
    return LossBreakdown(float(l_c.data), kl_value, float(objective.data), pixel_count, objective)


def _stack_scalars(xs: Sequence[Tensor]) -> Tensor:
    return stack([x.reshape(()) if x.ndim else x for x in xs])
