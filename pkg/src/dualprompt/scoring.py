"""Region logits, class-specific region aggregation and the dual-prompt classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

AGGREGATIONS = ("softmax_weighted", "average", "max")


@dataclass(frozen=True)
class ClassifierConfig:
    tau: float = 0.01
    aggregation: str = "softmax_weighted"
    spatial_temp: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if not self.spatial_temp > 0:
            raise ValueError("spatial_temp must be > 0")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")


@dataclass
class RegionLogits:
    pos: np.ndarray  # (..., R, M)
    neg: np.ndarray


@dataclass
class ScorePair:
    s_pos: np.ndarray
    s_neg: np.ndarray
    p: np.ndarray


def _unit_rows(a, what):
    a = np.asarray(a, dtype=np.float64)
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError(f"{what} contains a zero-norm row; cosine similarity is undefined")
    return a / norms


def region_logits(F_v, F_t_pos, F_t_neg) -> RegionLogits:
    """Cosine similarity of every region row with every class text feature.

    ``F_v`` may carry leading batch dims: ``(..., R, D_t)`` gives ``(..., R, M)``.
    """
    F_v = np.asarray(F_v)
    if F_v.shape[-1] != np.shape(F_t_pos)[-1] or np.shape(F_t_pos) != np.shape(F_t_neg):
        raise ValueError("region and text features must share the embedding dim and class count")
    v = _unit_rows(F_v, "F_v")
    tp = _unit_rows(F_t_pos, "F_t_pos")
    tn = _unit_rows(F_t_neg, "F_t_neg")
    return RegionLogits(v @ tp.T, v @ tn.T)


def spatial_weights(pos: np.ndarray, spatial_temp: float) -> np.ndarray:
    """Softmax over the region axis (-2) of ``pos / spatial_temp``."""
    a = pos / spatial_temp
    a = np.exp(a - a.max(axis=-2, keepdims=True))
    return a / a.sum(axis=-2, keepdims=True)


def aggregate(rl: RegionLogits, cfg: ClassifierConfig):
    """Reduce region logits ``(..., R, M)`` to per-class ``(S+, S-)`` of shape ``(..., M)``.

    The negative logits are pooled with weights derived from the positive ones.
    """
    pos, neg = np.asarray(rl.pos, dtype=np.float64), np.asarray(rl.neg, dtype=np.float64)
    if pos.shape != neg.shape:
        raise ValueError("positive and negative region logits differ in shape")
    if pos.ndim < 2 or pos.shape[-2] < 1:
        raise ValueError("aggregation needs at least one region")
    if cfg.aggregation == "softmax_weighted":
        w = spatial_weights(pos, cfg.spatial_temp)
        return (w * pos).sum(axis=-2), (w * neg).sum(axis=-2)
    if cfg.aggregation == "average":
        return pos.mean(axis=-2), neg.mean(axis=-2)
    idx = np.expand_dims(pos.argmax(axis=-2), -2)
    return (np.take_along_axis(pos, idx, axis=-2)[..., 0, :],
            np.take_along_axis(neg, idx, axis=-2)[..., 0, :])


def class_logit(s_pos, s_neg, tau: float):
    """``(S+ - S-) / tau``; a strictly increasing function of the probability."""
    return (np.asarray(s_pos, dtype=np.float64) - np.asarray(s_neg, dtype=np.float64)) / tau


def class_probability(s_pos, s_neg, tau: float):
    """Two-way softmax over the positive and negative logits, in logistic form."""
    if not tau > 0:
        raise ValueError("tau must be > 0")
    z = class_logit(s_pos, s_neg, tau)
    # exp(-|z|) never overflows; split by sign for full precision on both tails
    e = np.exp(-np.abs(z))
    p = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return p[()] if p.ndim == 0 else p


def score(rl: RegionLogits, cfg: ClassifierConfig) -> ScorePair:
    s_pos, s_neg = aggregate(rl, cfg)
    return ScorePair(s_pos, s_neg, class_probability(s_pos, s_neg, cfg.tau))


def predict_labels(sp: ScorePair) -> np.ndarray:
    """+1 where the positive logit is strictly larger, else -1 (ties are negative)."""
    return np.where(np.asarray(sp.s_pos) > np.asarray(sp.s_neg), 1, -1).astype(np.int8)


def export_attention_maps(rl: RegionLogits, cfg: ClassifierConfig, class_index: int, shape) -> np.ndarray:
    if cfg.aggregation != "softmax_weighted":
        raise ValueError("attention maps exist only for softmax_weighted aggregation")
    pos = np.asarray(rl.pos, dtype=np.float64)
    if pos.ndim != 2:
        raise ValueError("attention maps are exported per image: expected (R, M) logits")
    M = pos.shape[1]
    if not 0 <= class_index < M:
        raise IndexError(f"class index {class_index} out of range [0, {M})")
    H, W = shape
    if H * W != pos.shape[0]:
        raise ValueError(f"grid {H}x{W} does not match {pos.shape[0]} regions")
    return spatial_weights(pos[:, class_index:class_index + 1], cfg.spatial_temp)[:, 0].reshape(H, W)


def write_grid_csv(path, grid) -> None:
    with open(path, "w") as f:
        for row in np.asarray(grid):
            f.write(",".join(repr(float(v)) for v in row) + "\n")


def read_grid_csv(path) -> np.ndarray:
    with open(path) as f:
        return np.array([[float(v) for v in line.split(",")] for line in f if line.strip()])


def write_pgm(path, grid) -> None:
    """8-bit binary PGM, weights linearly rescaled so min -> 0 and max -> 255."""
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = g.min(), g.max()
    if hi > lo:
        px = np.rint((g - lo) / (hi - lo) * 255.0)
    else:
        px = np.full(g.shape, 255.0)
    H, W = g.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{W} {H}\n255\n".encode())
        f.write(px.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    data = open(path, "rb").read()
    magic, size, _maxval, pixels = data.split(b"\n", 3)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    W, H = (int(v) for v in size.split())
    return np.frombuffer(pixels[: W * H], dtype=np.uint8).reshape(H, W)
