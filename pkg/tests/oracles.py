"""Brute-force reference computations used by the tests.

Everything here is written with plain Python loops and exact rationals so it
shares no code path with the package.
"""

import math
from fractions import Fraction

import numpy as np


def softmax_list(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = sum(e)
    return [v / s for v in e]


def cosine(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))


def ap_exact(scores, labels):
    """AP as an exact Fraction; ties ranked by ascending index."""
    items = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    items = [i for i in items if labels[i] != 0]
    n_pos = sum(1 for i in items if labels[i] == 1)
    if n_pos == 0:
        return None
    total, hits = Fraction(0), 0
    for rank, i in enumerate(items, 1):
        if labels[i] == 1:
            hits += 1
            total += Fraction(hits, rank)
    return total / n_pos


def threshold_counts_loop(pred, truth):
    N, M = len(truth), len(truth[0])
    out = []
    for m in range(M):
        tp = fp = fn = 0
        for n in range(N):
            if truth[n][m] == 0:
                continue
            if pred[n][m] == 1 and truth[n][m] == 1:
                tp += 1
            elif pred[n][m] == 1:
                fp += 1
            elif truth[n][m] == 1:
                fn += 1
        out.append((tp, fp, fn))
    return out


def classwise_exact(pred, truth):
    counts = threshold_counts_loop(pred, truth)
    M = len(counts)
    cp = sum((Fraction(tp, tp + fp) if tp + fp else Fraction(0)) for tp, fp, _ in counts) / M
    rec = [Fraction(tp, tp + fn) for tp, _, fn in counts if tp + fn]
    cr = sum(rec) / len(rec) if rec else Fraction(0)
    TP = sum(c[0] for c in counts)
    FP = sum(c[1] for c in counts)
    FN = sum(c[2] for c in counts)
    op = Fraction(TP, TP + FP) if TP + FP else Fraction(0)
    orr = Fraction(TP, TP + FN) if TP + FN else Fraction(0)
    return {"counts": counts, "CP": cp, "CR": cr, "OP": op, "OR": orr}


def topk_exact(scores, truth, k):
    hits = n_pos = 0
    for row_s, row_t in zip(scores, truth):
        chosen = set(sorted(range(len(row_s)), key=lambda j: (-row_s[j], j))[:k])
        positives = {j for j, t in enumerate(row_t) if t == 1}
        hits += len(chosen & positives)
        n_pos += len(positives)
    n = len(scores)
    p = Fraction(hits, k * n)
    r = Fraction(hits, n_pos) if n_pos else Fraction(0)
    return hits, n_pos, p, r


def central_difference(f, x: np.ndarray, idx, h=1e-5):
    orig = x[idx]
    x[idx] = orig + h
    fp = f()
    x[idx] = orig - h
    fm = f()
    x[idx] = orig
    return (fp - fm) / (2 * h)


def rel_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)
