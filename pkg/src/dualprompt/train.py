"""Batch objective, exact prompt gradients, and the SGD + cosine annealing loop."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .asl import LossConfig
from .data import Dataset, check_labels
from .encoders import GradientUnsupportedError
from .prompts import PromptBank, PromptConfig, assemble_prompt, init_prompts
from .scoring import ClassifierConfig

log = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    def __init__(self, stage: str, detail: str = ""):
        self.stage = stage
        super().__init__(f"non-finite values at stage '{stage}'" + (f": {detail}" if detail else ""))


class TrainingAborted(RuntimeError):
    def __init__(self, epoch: int, step: int, batch: int, stage: str, last_good: PromptBank):
        self.epoch, self.step, self.batch, self.stage = epoch, step, batch, stage
        self.last_good = last_good
        super().__init__(f"training aborted at epoch {epoch}, step {step} (batch {batch}): "
                         f"non-finite values at stage '{stage}'")

    def diagnostic(self) -> dict:
        return {"error": "non_finite", "stage": self.stage, "epoch": self.epoch, "step": self.step,
                "batch_index": self.batch, "parameter_digest": bank_digest(self.last_good)}


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.002
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    momentum: float = 0.0
    schedule: str = "per_step"
    strict_deterministic: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)

    def __post_init__(self):
        if not self.lr0 >= 0:
            raise ValueError("lr0 must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.schedule not in ("per_step", "per_epoch"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class TrainHistory:
    mean_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.mean_loss)

    def write_csv(self, path, config_digest: str | None = None) -> None:
        """One row per epoch; ``config_digest`` adds a constant trailing column."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "mean_loss", "lr", "seconds"] + (["config_digest"] if config_digest else []))
            for e, (l, r, s) in enumerate(zip(self.mean_loss, self.lr, self.seconds), 1):
                w.writerow([e, repr(l), repr(r), repr(s)] + ([config_digest] if config_digest else []))

    @classmethod
    def read_csv(cls, path) -> TrainHistory:
        h = cls()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                h.mean_loss.append(float(row["mean_loss"]))
                h.lr.append(float(row["lr"]))
                h.seconds.append(float(row["seconds"]))
        return h


def cosine_lr(t: float, T: float, lr0: float) -> float:
    if T < 1 or not 0 <= t <= T:
        raise ValueError(f"cosine schedule needs 0 <= t <= T and T >= 1, got t={t}, T={T}")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / T))


def bank_digest(bank: PromptBank) -> str:
    h = hashlib.sha256(bank.mode.encode())
    for a in (bank.pos, bank.neg):
        h.update(str(a.shape).encode())
        h.update(np.ascontiguousarray(a, dtype=np.float32).tobytes())
    return h.hexdigest()


def _check(arr, stage):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(stage)
    return arr


def unit_regions(encoders, feature_maps) -> np.ndarray:
    """Project ``(B, H, W, D_v)`` feature maps and L2-normalize each region: ``(B, R, D_t)``."""
    fm = np.asarray(feature_maps, dtype=np.float64)
    B, H, W, Dv = fm.shape
    if hasattr(encoders, "project_batch"):
        F = encoders.project_batch(fm.reshape(B, H * W, Dv))
    else:
        F = np.stack([encoders.project_regions(x) for x in fm])
    _check(F, "project_regions")
    norms = np.linalg.norm(F, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("a projected region has zero norm; cosine similarity is undefined")
    return F / norms


class _TextPath:
    """Text features for every (class, polarity) plus the means needed to backpropagate."""

    def __init__(self, bank: PromptBank, tokens: np.ndarray, encoders):
        self.bank, self.tokens, self.enc = bank, tokens, encoders
        M = tokens.shape[0]
        self.kidx = np.arange(M) if bank.mode == "class_specific" else np.zeros(M, dtype=int)
        if bank.mode == "class_specific" and bank.n_pairs != M:
            raise ValueError(f"class_specific bank has {bank.n_pairs} pairs for {M} classes")
        self.fast = hasattr(encoders, "encode_mean_tokens")
        self.feats, self.norms = {}, {}
        for pol, ctx in (("+", bank.pos), ("-", bank.neg)):
            if self.fast:
                ctx_sum = np.asarray(ctx, dtype=np.float64).sum(axis=1)
                means = (ctx_sum[self.kidx] + tokens) / (ctx.shape[1] + 1)
                self.feats[pol], self.norms[pol] = encoders.encode_mean_tokens(means)
            else:
                self.feats[pol] = np.stack([
                    encoders.encode_text(assemble_prompt(bank.pair_for(m), tokens[m], pol)) for m in range(M)
                ])
            _check(self.feats[pol], "encode_text")

    def backward(self, grads: dict) -> PromptBank:
        """Map gradients on unit text features ``(M, D_t)`` to context-shaped gradients."""
        out = {}
        for pol, ctx in (("+", self.bank.pos), ("-", self.bank.neg)):
            K, N, D = ctx.shape
            g = np.zeros((K, N, D))
            if self.fast:
                dmean = self.enc.mean_tokens_vjp(self.feats[pol], self.norms[pol], grads[pol])
                row = dmean / (N + 1)
                np.add.at(g, self.kidx, np.broadcast_to(row[:, None, :], (row.shape[0], N, D)))
            else:
                for m in range(self.tokens.shape[0]):
                    seq = assemble_prompt(self.bank.pair_for(m), self.tokens[m], pol)
                    g[self.kidx[m]] += self.enc.encode_text_vjp(seq, grads[pol][m])[:N]
            out[pol] = g
        return PromptBank(self.bank.mode, out["+"], out["-"])


def _objective(bank, tokens, encoders, regions, labels, cls_cfg: ClassifierConfig, loss_cfg: LossConfig,
               need_grad: bool, backend=None):
    if need_grad and not getattr(encoders, "supports_gradients", False):
        raise GradientUnsupportedError("encoder backend is inference-only; it provides no text gradients")
    labels = check_labels(labels)
    if labels.shape[0] == 0:
        raise ValueError("batch is empty")
    text = _TextPath(bank, tokens, encoders)
    B, R, Dt = regions.shape
    pos = _check(regions @ text.feats["+"].T, "region_logits")
    neg = _check(regions @ text.feats["-"].T, "region_logits")
    loss_sum, n_known, _, _, d_pos, d_neg = kernels.fused_aggregate_asl(
        pos, neg, labels, cls_cfg.aggregation, cls_cfg.spatial_temp, cls_cfg.tau,
        loss_cfg.gamma_pos, loss_cfg.gamma_neg, loss_cfg.margin, backend=backend)
    if not math.isfinite(loss_sum):
        raise NonFiniteError("asl_loss")
    if loss_cfg.reduction == "mean_over_known":
        scale = 1.0 / n_known if n_known else 0.0
    else:
        scale = 1.0
    loss = loss_sum * scale
    if not need_grad:
        return loss, n_known, None
    flat_v = regions.reshape(B * R, Dt)
    grads = {"+": scale * (d_pos.reshape(B * R, -1).T @ flat_v),
             "-": scale * (d_neg.reshape(B * R, -1).T @ flat_v)}
    gbank = text.backward(grads)
    _check(gbank.pos, "loss_gradients")
    _check(gbank.neg, "loss_gradients")
    return loss, n_known, gbank


def batch_loss(bank, catalog, encoders, feature_maps, labels, classifier: ClassifierConfig,
               loss: LossConfig, backend=None) -> float:
    """ASL over all known cells of a batch of ``(B, H, W, D_v)`` feature maps."""
    regions = unit_regions(encoders, feature_maps)
    return _objective(bank, catalog.token_embeddings, encoders, regions, labels, classifier, loss,
                      need_grad=False, backend=backend)[0]


def loss_gradients(bank, catalog, encoders, feature_maps, labels, classifier: ClassifierConfig,
                   loss: LossConfig, backend=None) -> PromptBank:
    """Exact gradient of :func:`batch_loss` with respect to every context entry (float64)."""
    regions = unit_regions(encoders, feature_maps)
    return _objective(bank, catalog.token_embeddings, encoders, regions, labels, classifier, loss,
                      need_grad=True, backend=backend)[2]


def train(cfg: TrainConfig, dataset: Dataset, encoders, split=None, init_bank: PromptBank | None = None,
          backend=None, progress=None):
    """Optimize prompt contexts with plain SGD (optional momentum) on a cosine schedule.

    If ``split`` is given, unseen-class labels are zeroed before training.
    Returns ``(bank, history)``.  Context vectors are kept in float32.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    labels = dataset.labels
    if split is not None:
        from .data import restrict_labels_to_seen
        labels = restrict_labels_to_seen(labels, split)
    M = len(dataset.catalog)
    tokens = dataset.catalog.token_embeddings
    if cfg.prompt.dim != tokens.shape[1]:
        raise ValueError(f"prompt dim {cfg.prompt.dim} does not match class token dim {tokens.shape[1]}")
    bank = init_bank.copy() if init_bank is not None else init_prompts(cfg.prompt, M, cfg.seed)
    enc_digest = encoders.digest()

    regions = unit_regions(encoders, dataset.features())
    N = len(dataset)
    steps_per_epoch = math.ceil(N / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    rng = np.random.default_rng([cfg.seed, 1])
    vel_pos = np.zeros(bank.pos.shape)
    vel_neg = np.zeros(bank.neg.shape)
    history = TrainHistory()
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(N)
        loss_total, known_total = 0.0, 0
        epoch_lr = None
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            if cfg.schedule == "per_step":
                lr = cosine_lr(step, total, cfg.lr0)
            else:
                lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)
            if epoch_lr is None:
                epoch_lr = lr
            try:
                loss, n_known, g = _objective(bank, tokens, encoders, regions[idx], labels[idx],
                                              cfg.classifier, cfg.loss, need_grad=True, backend=backend)
            except NonFiniteError as e:
                raise TrainingAborted(epoch + 1, step, b, e.stage, bank.copy()) from e
            loss_total += loss * n_known if cfg.loss.reduction == "mean_over_known" else loss
            known_total += n_known
            if lr > 0:
                vel_pos = cfg.momentum * vel_pos + g.pos
                vel_neg = cfg.momentum * vel_neg + g.neg
                with np.errstate(over="ignore", invalid="ignore"):
                    new_pos = (bank.pos - lr * vel_pos).astype(np.float32)
                    new_neg = (bank.neg - lr * vel_neg).astype(np.float32)
                if not (np.all(np.isfinite(new_pos)) and np.all(np.isfinite(new_neg))):
                    raise TrainingAborted(epoch + 1, step, b, "sgd_update", bank.copy())
                bank = PromptBank(bank.mode, new_pos, new_neg)
            step += 1
        mean = loss_total / known_total if known_total else 0.0
        history.mean_loss.append(mean)
        history.lr.append(epoch_lr)
        history.seconds.append(0.0 if cfg.strict_deterministic else time.perf_counter() - t0)
        log.info("epoch %d/%d  loss %.6f  lr %.6g", epoch + 1, cfg.epochs, mean, epoch_lr)
        if progress is not None:
            progress(epoch + 1, mean)
    if encoders.digest() != enc_digest:
        raise RuntimeError("encoder parameters changed during training")
    return bank, history
