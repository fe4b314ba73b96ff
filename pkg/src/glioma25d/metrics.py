"""Classification metrics, ROC/PR curves, bootstrap CIs and BG-aware confusion matrices.

Predictions are label strings ``"class0"``, ``"class1"`` or ``"BG"`` (no tumor
detected in any plane). Ground-truth labels are ``"class0"``/``"class1"``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DataError

CLASSES = ("class0", "class1")
BG = "BG"
PRED_COLUMNS = ("class0", "class1", BG)


def confusion_with_bg(final_preds: Sequence[str], labels: Sequence[str]) -> np.ndarray:
    """2x3 count matrix; rows are true class0/class1, columns predicted class0/class1/BG."""
    if len(final_preds) != len(labels):
        raise DataError(f"length mismatch: {len(final_preds)} predictions vs {len(labels)} labels")
    out = np.zeros((2, 3), dtype=int)
    for p, t in zip(final_preds, labels):
        if t not in CLASSES:
            raise DataError(f"unknown true label {t!r}")
        if p not in PRED_COLUMNS:
            raise DataError(f"unknown predicted label {p!r}")
        out[CLASSES.index(t), PRED_COLUMNS.index(p)] += 1
    return out


@dataclass
class BinaryMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    n_bg: int
    undefined: tuple[str, ...] = ()


def binary_metrics(final_preds: Sequence[str], labels: Sequence[str],
                   positive_class: str = "class1") -> BinaryMetrics:
    """Accuracy/precision/recall/F1 with BG counted wrong and as a negative call.

    Undefined metrics (no predicted positives, no positive cases) come back as
    NaN and are named in ``undefined``.
    """
    cm = confusion_with_bg(final_preds, labels)
    return metrics_from_confusion(cm, positive_class)


def metrics_from_confusion(cm: np.ndarray, positive_class: str = "class1") -> BinaryMetrics:
    pos = CLASSES.index(positive_class)
    neg = 1 - pos
    tp = int(cm[pos, pos])
    fn = int(cm[pos, neg] + cm[pos, 2])
    fp = int(cm[neg, pos])
    tn = int(cm[neg, neg])
    n_bg = int(cm[:, 2].sum())
    n = int(cm.sum())
    undefined = []
    accuracy = (tp + tn) / n if n else math.nan
    if not n:
        undefined.append("accuracy")
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision = math.nan
        undefined.append("precision")
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall = math.nan
        undefined.append("recall")
    if math.isnan(precision) or math.isnan(recall) or precision + recall == 0:
        f1 = math.nan
        undefined.append("f1")
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return BinaryMetrics(accuracy, precision, recall, f1, tp, fp, fn, tn, n_bg, tuple(undefined))


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape or s.ndim != 1:
        raise DataError("scores and labels must be 1-D and aligned")
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be 0/1")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise DataError("both classes must be present")
    return s, y


def midrank(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties given their average rank."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    n = len(x)
    ranks_sorted = np.empty(n, dtype=float)
    i = 0
    while i < n:
        j = i
        while j < n and xs[j] == xs[i]:
            j += 1
        ranks_sorted[i:j] = 0.5 * (i + j - 1) + 1.0
        i = j
    out = np.empty(n, dtype=float)
    out[order] = ranks_sorted
    return out


def auroc(scores, labels) -> float:
    """Mann-Whitney AUC (ties credited 1/2), computed from midranks."""
    s, y = _check_binary(scores, labels)
    m = int(y.sum())
    n = len(y) - m
    r = midrank(s)
    return float((r[y == 1].sum() - m * (m + 1) / 2.0) / (m * n))


@dataclass
class Curve:
    x: np.ndarray
    y: np.ndarray
    thresholds: np.ndarray
    area: float


def _threshold_counts(s, y):
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    # last index of each distinct score, descending
    distinct = np.where(np.diff(s_sorted))[0]
    idx = np.r_[distinct, len(s_sorted) - 1]
    tps = np.cumsum(y_sorted)[idx]
    fps = (idx + 1) - tps
    return s_sorted[idx], tps.astype(float), fps.astype(float)


def roc_auc(scores, labels) -> Curve:
    s, y = _check_binary(scores, labels)
    thr, tps, fps = _threshold_counts(s, y)
    fpr = np.r_[0.0, fps / fps[-1]]
    tpr = np.r_[0.0, tps / tps[-1]]
    return Curve(fpr, tpr, np.r_[np.inf, thr], auroc(s, y))


def pr_auc(scores, labels) -> Curve:
    """PR curve and step-sum area (average precision) over descending thresholds."""
    s, y = _check_binary(scores, labels)
    thr, tps, fps = _threshold_counts(s, y)
    precision = tps / (tps + fps)
    recall = tps / tps[-1]
    area = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return Curve(np.r_[0.0, recall], np.r_[1.0, precision], np.r_[np.inf, thr], area)


def auprc(scores, labels) -> float:
    return pr_auc(scores, labels).area


@dataclass
class BootstrapCI:
    lo: float
    hi: float
    n_valid: int
    n_skipped: int


def bootstrap_ci(scores, labels, metric_fn: Callable[[np.ndarray, np.ndarray], float],
                 n_resamples: int = 1000, seed: int = 0,
                 percentiles: tuple[float, float] = (5.0, 95.0)) -> BootstrapCI:
    """Percentile bootstrap over cases.

    Each resample draws from its own generator spawned from ``seed`` so the
    result does not depend on evaluation order. Single-class resamples are
    skipped; more than half skipped raises.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(int)
    n = len(s)
    children = np.random.SeedSequence(seed).spawn(n_resamples)
    values = []
    skipped = 0
    for child in children:
        idx = np.random.default_rng(child).integers(0, n, size=n)
        yb = y[idx]
        if yb.min() == yb.max():
            skipped += 1
            continue
        values.append(metric_fn(s[idx], yb))
    if skipped > n_resamples / 2:
        raise DataError(f"bootstrap unreliable: {skipped}/{n_resamples} resamples had a single class")
    lo, hi = np.percentile(np.asarray(values), percentiles)
    return BootstrapCI(float(lo), float(hi), len(values), skipped)


@dataclass
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auroc: float
    auroc_ci: tuple[float, float]
    auprc: float
    auprc_ci: tuple[float, float]
    n: int
    n_bg: int
    undefined: list[str] = field(default_factory=list)
    confusion: list[list[int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["auroc_ci"] = list(self.auroc_ci)
        d["auprc_ci"] = list(self.auprc_ci)
        return d


def metric_report(final_preds: Sequence[str], labels: Sequence[str], scores,
                  positive_class: str = "class1", n_resamples: int = 1000, seed: int = 0,
                  percentiles: tuple[float, float] = (5.0, 95.0)) -> MetricReport:
    cm = confusion_with_bg(final_preds, labels)
    bm = metrics_from_confusion(cm, positive_class)
    y = np.array([1 if t == positive_class else 0 for t in labels])
    s = np.asarray(scores, dtype=float)
    if positive_class == "class0":
        s = 1.0 - s
    a_roc = auroc(s, y)
    a_pr = auprc(s, y)
    ci_roc = bootstrap_ci(s, y, auroc, n_resamples, seed, percentiles)
    ci_pr = bootstrap_ci(s, y, auprc, n_resamples, seed, percentiles)
    return MetricReport(
        accuracy=bm.accuracy, precision=bm.precision, recall=bm.recall, f1=bm.f1,
        auroc=a_roc, auroc_ci=(ci_roc.lo, ci_roc.hi),
        auprc=a_pr, auprc_ci=(ci_pr.lo, ci_pr.hi),
        n=len(labels), n_bg=bm.n_bg, undefined=list(bm.undefined),
        confusion=cm.tolist(),
    )
