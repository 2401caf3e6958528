"""Pixel-wise ranking metrics plus PSNR and IoU.

All ranking metrics sweep every distinct score as a threshold, predicting
positive for ``score >= threshold``; tied scores enter or leave together.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import OVFieldError

PSNR_CAP = 99.0
TPR_TARGET = 0.95


class UndefinedMetricError(OVFieldError, ValueError):
    exit_code = 4


@dataclass
class ScoredPixels:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).ravel().astype(bool)
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels differ in length")

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int(self.labels.size - self.labels.sum())


def _as_scored(sp, labels=None) -> ScoredPixels:
    if labels is not None:
        sp = ScoredPixels(sp, labels)
    if sp.n_pos == 0 or sp.n_neg == 0:
        raise UndefinedMetricError("ranking metrics need at least one positive and one negative")
    return sp


def _sweep(sp: ScoredPixels) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (true positive, false positive) counts at each distinct threshold."""
    order = np.argsort(-sp.scores, kind="mergesort")
    s = sp.scores[order]
    y = sp.labels[order]
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    return tp.astype(np.float64), fp.astype(np.float64)


def precision_recall_curve(sp: ScoredPixels, labels=None):
    sp = _as_scored(sp, labels)
    tp, fp = _sweep(sp)
    return tp / (tp + fp), tp / sp.n_pos


def auprc(sp: ScoredPixels, labels=None) -> float:
    """Step-wise area under the precision-recall curve (average precision)."""
    precision, recall = precision_recall_curve(sp, labels)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def fpr_at_95_tpr(sp: ScoredPixels, labels=None) -> float:
    """Smallest false-positive rate among thresholds whose TPR reaches 95%."""
    sp = _as_scored(sp, labels)
    tp, fp = _sweep(sp)
    # Integer comparison avoids float trouble at exactly 95%.
    reach = np.flatnonzero(tp * 100 >= 95 * sp.n_pos)
    return float(fp[reach[0]] / sp.n_neg)


def auroc(sp: ScoredPixels, labels=None) -> float:
    """Mann-Whitney estimate; tied pairs earn half credit."""
    sp = _as_scored(sp, labels)
    ranks = rankdata(sp.scores)
    p, n = sp.n_pos, sp.n_neg
    return float((ranks[sp.labels].sum() - p * (p + 1) / 2.0) / (p * n))


def psnr(img: np.ndarray, ref: np.ndarray) -> float:
    """PSNR in dB for images in [0, 1]; identical images report ``PSNR_CAP``."""
    mse = float(np.mean((np.asarray(img, dtype=np.float64) - np.asarray(ref, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        raise UndefinedMetricError("IoU of two empty masks is undefined")
    return np.count_nonzero(a & b) / union


def metric_row(scores: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    sp = ScoredPixels(scores, labels)
    return {"auprc": auprc(sp), "fpr95": fpr_at_95_tpr(sp), "auroc": auroc(sp)}
