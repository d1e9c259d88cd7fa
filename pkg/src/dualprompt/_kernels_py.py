"""Pure numpy implementation of the fused training kernel."""

import numpy as np

from .asl import asl_from_logits

MODES = {"softmax_weighted": 0, "average": 1, "max": 2}


def fused_aggregate_asl(pos, neg, labels, mode, spatial_temp, tau, gamma_pos, gamma_neg, margin):
    """Aggregate region logits, score, and backpropagate the summed ASL loss.

    pos, neg : (B, R, M) cosine logits
    labels   : (B, M) int8 in {+1, -1, 0}

    Returns ``(loss_sum, n_known, s_pos, s_neg, d_pos, d_neg)`` where the
    gradients are of ``loss_sum`` (not the mean) with respect to pos and neg.
    """
    B, R, M = pos.shape
    if mode == 0:
        a = pos / spatial_temp
        w = np.exp(a - a.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        s_pos = (w * pos).sum(axis=1)
        s_neg = (w * neg).sum(axis=1)
    elif mode == 1:
        s_pos = pos.mean(axis=1)
        s_neg = neg.mean(axis=1)
    else:
        idx = pos.argmax(axis=1)[:, None, :]
        s_pos = np.take_along_axis(pos, idx, axis=1)[:, 0, :]
        s_neg = np.take_along_axis(neg, idx, axis=1)[:, 0, :]

    z = (s_pos - s_neg) / tau
    loss, g = asl_from_logits(z, labels, gamma_pos, gamma_neg, margin)
    known = labels != 0
    loss_sum = float(loss[known].sum())
    n_known = int(known.sum())

    a = (g / tau)[:, None, :]
    if mode == 0:
        d_pos = a * w * (1.0 + ((pos - s_pos[:, None, :]) - (neg - s_neg[:, None, :])) / spatial_temp)
        d_neg = -a * w
    elif mode == 1:
        d_pos = np.broadcast_to(a / R, pos.shape).copy()
        d_neg = -d_pos
    else:
        d_pos = np.zeros_like(pos)
        np.put_along_axis(d_pos, idx, a, axis=1)
        d_neg = -d_pos
    return loss_sum, n_known, s_pos, s_neg, d_pos, d_neg
