"""Evaluation metrics and training diagnostics.

Loss confusion matrices follow the layout of the classic class-imbalance
plot: in-type answers are ordered from frequent to sparse (by training
votes), ``matrix[g, p]`` holds the mean loss of instances whose ground truth
is the g-th answer and whose prediction is the p-th answer. Drawn with
ground truth on the x-axis and prediction on the y-axis, the *upper* triangle
is ``p < g``: a sparse answer predicted as a more frequent one.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from langprior import losses
from langprior.datagen import Dataset
from langprior.net import GROUPS, ModelParams, TrainingTrace, forward
from langprior.vocab import TypeCountTable


def vqa_accuracy(predictions, annotator_counts) -> float:
    """Mean over instances of ``min(1, votes for the predicted answer / 3)``."""
    pred = np.asarray(predictions, dtype=np.int64)
    counts = np.atleast_2d(np.asarray(annotator_counts))
    if pred.ndim != 1 or pred.shape[0] != counts.shape[0]:
        raise ValueError(f"{pred.shape[0] if pred.ndim else 1} predictions for {counts.shape[0]} instances")
    if pred.size == 0:
        raise ValueError("no instances")
    votes = counts[np.arange(len(pred)), pred]
    return float(np.mean(np.minimum(1.0, votes / 3.0)))


def per_type_accuracy(predictions, annotator_counts, type_ids, num_types: int) -> list[float | None]:
    pred = np.asarray(predictions)
    t = np.asarray(type_ids)
    out = []
    for j in range(num_types):
        sel = t == j
        out.append(vqa_accuracy(pred[sel], np.asarray(annotator_counts)[sel]) if sel.any() else None)
    return out


def hard_labels(annotator_counts) -> np.ndarray:
    """Most-voted answer per instance, lowest index on ties."""
    return np.argmax(np.atleast_2d(annotator_counts), axis=1)


def cohens_kappa(preds, labels) -> float:
    a = np.asarray(preds)
    b = np.asarray(labels)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("predictions and labels must be vectors of equal length")
    if a.size == 0:
        raise ValueError("no instances")
    classes, inv = np.unique(np.concatenate([a, b]), return_inverse=True)
    ia, ib = inv[: a.size], inv[a.size:]
    k = len(classes)
    conf = np.zeros((k, k))
    np.add.at(conf, (ia, ib), 1.0)
    n = float(a.size)
    p_o = np.trace(conf) / n
    p_e = float(np.dot(conf.sum(axis=1), conf.sum(axis=0))) / (n * n)
    if p_e == 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return float((p_o - p_e) / (1.0 - p_e))


@dataclass
class LossConfusion:
    type_id: int
    order: np.ndarray  # answer indices, frequent -> sparse
    matrix: np.ndarray  # mean loss, NaN where count == 0
    counts: np.ndarray
    sums: np.ndarray

    @property
    def size(self) -> int:
        return len(self.order)

    def write_csv(self, path: str | Path, answers=None) -> None:
        names = [answers[i] if answers is not None else str(i) for i in self.order]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true_rank", "true_answer", "pred_rank", "pred_answer", "count", "mean_loss"])
            for g in range(self.size):
                for p in range(self.size):
                    if self.counts[g, p]:
                        w.writerow([g, names[g], p, names[p], int(self.counts[g, p]),
                                    repr(float(self.matrix[g, p]))])


def confusion_from_records(gt, pred, loss, order, type_id: int = 0) -> LossConfusion:
    """Build a loss confusion matrix from per-instance (truth, prediction, loss).

    Only mispredictions whose truth and prediction are both in ``order`` count.
    """
    order = np.asarray(order)
    if order.size < 2:
        raise ValueError("loss confusion needs at least 2 in-type answers")
    rank = {int(a): r for r, a in enumerate(order)}
    k = order.size
    counts = np.zeros((k, k), dtype=np.int64)
    sums = np.zeros((k, k))
    for g, p, l in zip(np.asarray(gt), np.asarray(pred), np.asarray(loss, dtype=np.float64)):
        g, p = int(g), int(p)
        if g == p or g not in rank or p not in rank:
            continue
        counts[rank[g], rank[p]] += 1
        sums[rank[g], rank[p]] += l
    with np.errstate(invalid="ignore", divide="ignore"):
        matrix = np.where(counts > 0, sums / counts, np.nan)
    return LossConfusion(type_id, order, matrix, counts, sums)


def instance_losses(params: ModelParams, dataset: Dataset, loss_kind: str = "soft_ce") -> tuple[np.ndarray, np.ndarray]:
    """Unweighted, unmasked per-instance loss and argmax prediction."""
    cache = forward(dataset.q, dataset.v, params)
    scores = dataset.scores
    if loss_kind == "soft_ce":
        res = losses.soft_ce(cache.logits, scores)
    elif loss_kind == "sigm_bce":
        res = losses.sigm_bce(cache.logits, scores)
    elif loss_kind == "focal":
        res = losses.focal(cache.logits, scores)
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    return np.asarray(res.loss), np.argmax(cache.logits, axis=1)


def loss_confusion(
    params: ModelParams,
    dataset: Dataset,
    j: int,
    count_table: TypeCountTable,
    loss_kind: str = "soft_ce",
) -> LossConfusion:
    """Loss confusion matrix of question type ``j`` on ``dataset``.

    Uses the plain loss (no re-scaling, no mask) whatever the model was
    trained with, so the matrix describes the model rather than its objective.
    """
    order = count_table.frequency_order(j)
    if order.size < 2:
        raise ValueError(f"type {j} has fewer than 2 in-type answers")
    sel = dataset.type_ids == j
    loss, pred = instance_losses(params, dataset.subset(sel), loss_kind)
    gt = dataset.majority()[sel]
    return confusion_from_records(gt, pred, loss, order, j)


def _triangle(conf: LossConfusion, upper: bool) -> tuple[float, int]:
    k = conf.size
    g, p = np.indices((k, k))
    cells = (p < g) if upper else (p > g)
    n = int(conf.counts[cells].sum())
    return (float(conf.sums[cells].sum() / n) if n else math.nan), n


def triangle_asymmetry(conf: LossConfusion) -> tuple[float, float, float]:
    """Count-weighted mean loss of the upper and lower triangles and their ratio.

    Upper: a sparser answer predicted as a more frequent one. Lower: the
    reverse. Raises if either triangle has no mispredictions.
    """
    upper, nu = _triangle(conf, upper=True)
    lower, nl = _triangle(conf, upper=False)
    if nu == 0 or nl == 0:
        raise ValueError("insufficient mispredictions")
    return upper, lower, upper / lower


def gradient_norm_trace(trace: TrainingTrace, path: str | Path | None = None) -> dict[str, np.ndarray]:
    """Per-group gradient L2 norm per iteration, optionally written as CSV."""
    if len(trace) == 0:
        raise ValueError("empty training trace")
    series = {g: trace.norms(g) for g in GROUPS}
    if path is not None:
        iters = trace.column("iter")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "group", "norm"])
            for k, it in enumerate(iters):
                for g in GROUPS:
                    w.writerow([int(it), g, repr(float(series[g][k]))])
    return series


def norm_trend(series: np.ndarray, frac: float = 0.2) -> float:
    """Late-over-early ratio of mean gradient norm (first vs last ``frac`` of iterations)."""
    s = np.asarray(series, dtype=np.float64)
    if s.size < 2:
        raise ValueError("need at least two iterations")
    w = max(1, int(len(s) * frac))
    early = float(np.mean(s[:w]))
    late = float(np.mean(s[-w:]))
    return late / early if early > 0 else math.inf
