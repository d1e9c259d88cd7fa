"""Asymmetric loss for partially labelled multi-label targets."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LossConfig:
    gamma_pos: float = 1.0
    gamma_neg: float = 2.0
    margin: float = 0.05
    reduction: str = "mean_over_known"

    def __post_init__(self):
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise ValueError("focusing exponents must be >= 0")
        if not 0 <= self.margin < 1:
            raise ValueError("margin must lie in [0, 1)")
        if self.reduction not in ("mean_over_known", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if self.gamma_neg < self.gamma_pos:
            warnings.warn("gamma_neg < gamma_pos: easy negatives are not down-weighted", stacklevel=3)


def asl_loss(p, y, cfg: LossConfig):
    """Per-cell loss from probabilities ``p`` and labels ``y`` in {+1, -1}.

    Positives: ``-(1-p)**gamma_pos * log(p)``.  Negatives use the shifted
    probability ``p_c = max(p - margin, 0)``: ``-p_c**gamma_neg * log(1-p_c)``,
    which is exactly 0 whenever ``p <= margin``.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y)
    if np.any(~((p > 0) & (p < 1))):
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    if np.any((y != 1) & (y != -1)):
        raise ValueError("asl_loss takes labels +1 or -1 only; filter unknown cells first")
    pos = -((1.0 - p) ** cfg.gamma_pos) * np.log(p)
    p_c = np.maximum(p - cfg.margin, 0.0)
    # 0**0 == 1 in numpy, and log1p(-0) == 0, so the p <= margin zone gives 0 exactly
    neg = -(p_c ** cfg.gamma_neg) * np.log1p(-p_c)
    out = np.where(y == 1, pos, neg) + 0.0
    return out[()] if out.ndim == 0 else out


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def asl_from_logits(z, y, gamma_pos: float, gamma_neg: float, margin: float):
    """Loss and d(loss)/dz for logits ``z`` with ``p = sigmoid(z)``.

    Cells with ``y == 0`` contribute zero loss and zero gradient.  Works in
    log space so that saturated logits stay finite.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y)
    e = np.exp(-np.abs(z))
    p = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    q = np.where(z >= 0, e / (1.0 + e), 1.0 / (1.0 + e))

    log_p = -_softplus(-z)
    gp = gamma_pos
    q_gp = q ** gp
    loss_pos = -q_gp * log_p
    grad_pos = q_gp * (gp * p * log_p - q)

    c = margin
    gn = gamma_neg
    p_c = np.maximum(p - c, 0.0)
    active = p_c > 0
    one_m = q + c
    if c > 0:
        log_1m = np.log(one_m)
        ratio = q / one_m
    else:
        log_1m = -_softplus(z)
        ratio = np.ones_like(q)
    pc_gn = p_c ** gn
    loss_neg = np.where(active, -pc_gn * log_1m, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        focus = gn * p * q * np.where(active, p_c ** (gn - 1.0), 0.0) * log_1m if gn != 0 else 0.0
    grad_neg = np.where(active, p * pc_gn * ratio - focus, 0.0)

    loss = np.where(y == 1, loss_pos, np.where(y == -1, loss_neg, 0.0))
    grad = np.where(y == 1, grad_pos, np.where(y == -1, grad_neg, 0.0))
    return loss, grad


def binary_cross_entropy(p, y):
    p = np.asarray(p, dtype=np.float64)
    return np.where(np.asarray(y) == 1, -np.log(p), -np.log1p(-p))
