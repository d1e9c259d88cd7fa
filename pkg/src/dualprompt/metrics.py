"""mAP, thresholded per-class/overall metrics, Top-K metrics and the evaluation driver."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .data import ZslSplit, check_labels
from .scoring import ClassifierConfig, aggregate, class_logit, class_probability, predict_labels, ScorePair, RegionLogits


class IncompatibleCheckpointError(ValueError):
    pass


def _ratio(num, den) -> float:
    return num / den if den else 0.0


def _f1(p, r) -> float:
    return 2 * p * r / (p + r) if p + r else 0.0


def average_precision(scores, labels) -> float | None:
    """Non-interpolated AP: mean precision at the rank of every positive.

    Ranking is by descending score, ties broken by ascending index.
    Returns ``None`` when there is no positive.  Entries labelled 0 are ignored.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    keep = labels != 0
    scores, labels = scores[keep], labels[keep]
    if not np.any(labels == 1):
        return None
    order = np.argsort(-scores, kind="stable")
    hits = (labels[order] == 1)
    cum = np.cumsum(hits)
    ranks = np.arange(1, len(hits) + 1)
    return float(np.mean(cum[hits] / ranks[hits]))


@dataclass
class ThresholdCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray


def threshold_counts(predictions, truth) -> ThresholdCounts:
    pred = check_labels(predictions)
    truth = check_labels(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    known = truth != 0
    tp = np.sum((pred == 1) & (truth == 1), axis=0)
    fp = np.sum((pred == 1) & (truth == -1) & known, axis=0)
    fn = np.sum((pred != 1) & (truth == 1), axis=0)
    return ThresholdCounts(tp, fp, fn)


def classwise_overall_metrics(predictions, truth) -> dict:
    """CP, CR, CF1 (per-class averaged) and OP, OR, OF1 (pooled) over known truth cells.

    Per-class 0/0 counts as 0; classes without known positives are left out
    of the CR average.
    """
    c = threshold_counts(predictions, truth)
    cp = float(np.mean([_ratio(t, t + f) for t, f in zip(c.tp, c.fp)])) if len(c.tp) else 0.0
    with_pos = [(t, n) for t, n in zip(c.tp, c.fn) if t + n > 0]
    cr = float(np.mean([t / (t + n) for t, n in with_pos])) if with_pos else 0.0
    TP, FP, FN = int(c.tp.sum()), int(c.fp.sum()), int(c.fn.sum())
    op, orr = _ratio(TP, TP + FP), _ratio(TP, TP + FN)
    return {"CP": cp, "CR": cr, "CF1": _f1(cp, cr), "OP": op, "OR": orr, "OF1": _f1(op, orr),
            "classes_without_positives": [int(m) for m in np.flatnonzero(c.tp + c.fn == 0)]}


def topk_select(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores per row; ties go to the lower class index."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), axis=1, kind="stable")[:, :k]


def topk_hits(scores, truth, k: int):
    """Returns ``(hits, n_truth_positive, n_images)`` as integers."""
    scores = np.asarray(scores)
    truth = check_labels(truth)
    if scores.shape != truth.shape:
        raise ValueError("scores and truth differ in shape")
    if not 1 <= k <= scores.shape[1]:
        raise ValueError(f"K={k} must lie in [1, {scores.shape[1]}]")
    top = topk_select(scores, k)
    hits = int(np.sum(np.take_along_axis(truth, top, axis=1) == 1))
    return hits, int(np.sum(truth == 1)), scores.shape[0]


def topk_metrics(probabilities, truth, k: int):
    """Precision, recall and F1 over each image's ``k`` highest-scoring classes."""
    hits, n_pos, n = topk_hits(probabilities, truth, k)
    p, r = _ratio(hits, k * n), _ratio(hits, n_pos)
    return p, r, _f1(p, r)


@dataclass
class EvalMode:
    kind: str = "partial_label"
    topk: tuple[int, ...] = (3, 5)
    split: ZslSplit | None = None

    def __post_init__(self):
        if self.kind not in ("partial_label", "zsl", "gzsl"):
            raise ValueError(f"unknown evaluation mode {self.kind!r}")
        if any(k < 1 for k in self.topk):
            raise ValueError("Top-K values must be >= 1")
        if self.kind != "partial_label" and self.split is None:
            raise ValueError(f"{self.kind} evaluation needs a seen/unseen split")

    def class_subset(self, n_classes: int) -> list[int]:
        if self.kind == "zsl":
            return sorted(self.split.unseen)
        return list(range(n_classes))


@dataclass
class MetricsReport:
    mode: str
    classes: list[str]
    mAP: float
    CP: float
    CR: float
    CF1: float
    OP: float
    OR: float
    OF1: float
    topk: dict[int, dict[str, float]]
    per_class_ap: dict[str, float | None]
    excluded_from_map: list[str] = field(default_factory=list)
    classes_without_positives: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def flat(self) -> dict:
        row = {"mode": self.mode, "mAP": self.mAP, "CP": self.CP, "CR": self.CR, "CF1": self.CF1,
               "OP": self.OP, "OR": self.OR, "OF1": self.OF1}
        for k, v in sorted(self.topk.items()):
            row.update({f"P@{k}": v["P"], f"R@{k}": v["R"], f"F1@{k}": v["F1"]})
        return row

    def to_dict(self) -> dict:
        d = self.flat()
        d.update({"classes": self.classes, "per_class_ap": self.per_class_ap,
                  "excluded_from_map": self.excluded_from_map,
                  "classes_without_positives": self.classes_without_positives, "meta": self.meta})
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())

    @classmethod
    def from_dict(cls, d: dict) -> MetricsReport:
        topk = {}
        for key, v in d.items():
            if key.startswith("P@"):
                k = int(key[2:])
                topk[k] = {"P": v, "R": d[f"R@{k}"], "F1": d[f"F1@{k}"]}
        return cls(d["mode"], d["classes"], d["mAP"], d["CP"], d["CR"], d["CF1"], d["OP"], d["OR"],
                   d["OF1"], topk, d["per_class_ap"], d.get("excluded_from_map", []),
                   d.get("classes_without_positives", []), d.get("meta", {}))

    def write_csv_row(self, path, extra: dict | None = None, append: bool = False) -> None:
        row = {**(extra or {}), **self.flat()}
        exists = append and _nonempty(path)
        with open(path, "a" if append else "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(row), lineterminator="\n")
            if not exists:
                w.writeheader()
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _nonempty(path) -> bool:
    try:
        with open(path) as f:
            return bool(f.read(1))
    except FileNotFoundError:
        return False


def report_from_scores(s_pos, s_neg, truth, class_names, mode: EvalMode, tau: float,
                       class_subset=None) -> MetricsReport:
    """Assemble a report from aggregated logits ``(N, M)`` restricted to ``class_subset``."""
    cols = list(range(len(class_names))) if class_subset is None else list(class_subset)
    s_pos, s_neg = np.asarray(s_pos)[:, cols], np.asarray(s_neg)[:, cols]
    truth = check_labels(truth)[:, cols]
    names = [class_names[m] for m in cols]
    # ranking uses the logit (S+ - S-)/tau: same order as p, but free of saturation ties at p == 1.0
    rank_scores = class_logit(s_pos, s_neg, tau)
    per_class, aps, excluded = {}, [], []
    for j, name in enumerate(names):
        ap = average_precision(rank_scores[:, j], truth[:, j])
        per_class[name] = ap
        if ap is None:
            excluded.append(name)
        else:
            aps.append(ap)
    preds = predict_labels(ScorePair(s_pos, s_neg, class_probability(s_pos, s_neg, tau)))
    cm = classwise_overall_metrics(preds, truth)
    topk = {}
    for k in mode.topk:
        if k <= len(cols):
            p, r, f = topk_metrics(rank_scores, truth, k)
            topk[k] = {"P": p, "R": r, "F1": f}
    return MetricsReport(mode.kind, names, float(np.mean(aps)) if aps else 0.0,
                         cm["CP"], cm["CR"], cm["CF1"], cm["OP"], cm["OR"], cm["OF1"], topk, per_class,
                         excluded, [names[m] for m in cm["classes_without_positives"]])


def score_dataset(bank, catalog, encoders, dataset, classifier: ClassifierConfig, batch_size: int = 256):
    """Aggregated ``(S+, S-)`` for every image and every class, shape ``(N, M)`` each."""
    from .train import _TextPath, unit_regions

    text = _TextPath(bank, catalog.token_embeddings, encoders)
    feats = dataset.features()
    out_pos, out_neg = [], []
    for start in range(0, len(dataset), batch_size):
        regions = unit_regions(encoders, feats[start:start + batch_size])
        rl = RegionLogits(regions @ text.feats["+"].T, regions @ text.feats["-"].T)
        sp, sn = aggregate(rl, classifier)
        out_pos.append(sp)
        out_neg.append(sn)
    return np.concatenate(out_pos), np.concatenate(out_neg)


def evaluate(bank, catalog, encoders, dataset, mode: EvalMode, classifier: ClassifierConfig) -> MetricsReport:
    M = len(catalog)
    if mode.kind in ("zsl", "gzsl"):
        if bank.mode != "shared":
            raise IncompatibleCheckpointError(
                f"{mode.kind} evaluation scores unseen classes, which needs shared prompts; "
                f"got a {bank.mode} bank"
            )
        if mode.split.n_classes != M:
            raise ValueError(f"split covers {mode.split.n_classes} classes, catalog has {M}")
    elif bank.mode == "class_specific" and bank.n_pairs != M:
        raise IncompatibleCheckpointError(f"bank holds {bank.n_pairs} class prompts, catalog has {M} classes")
    s_pos, s_neg = score_dataset(bank, catalog, encoders, dataset, classifier)
    return report_from_scores(s_pos, s_neg, dataset.labels, list(catalog.names), mode, classifier.tau,
                              mode.class_subset(M))
