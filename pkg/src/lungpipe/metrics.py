"""Confusion-based metrics and log-loss scoring.

A prediction counts positive iff its probability is strictly above the
threshold. Denominator-free metrics are reported as ``None`` rather than 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PATIENT_THRESHOLD = 0.25  # default patient-level decision threshold
CELL_THRESHOLD = 0.5  # default cell-level detector threshold
LOG_CLAMP = 1e-15


@dataclass
class ScoredSet:
    """Paired predicted probabilities and true binary labels."""

    probs: np.ndarray
    labels: np.ndarray
    threshold: float = PATIENT_THRESHOLD

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.probs.shape != self.labels.shape:
            raise ValueError("probs and labels must have the same shape")
        if not (0 < self.threshold < 1):
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")


def confusion(s: ScoredSet) -> tuple[int, int, int, int]:
    """(TP, FP, TN, FN) at the set's threshold (positive iff prob > threshold)."""
    if s.probs.size == 0:
        raise ValueError("empty scored set")
    pred = s.probs > s.threshold
    truth = s.labels == 1
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    tn = int(np.sum(~pred & ~truth))
    fn = int(np.sum(~pred & truth))
    return tp, fp, tn, fn


def sensitivity_specificity_f1(conf: tuple[int, int, int, int]):
    """Sensitivity, specificity, F1; ``None`` where the denominator is zero."""
    tp, fp, tn, fn = conf
    sens = tp / (tp + fn) if tp + fn else None
    spec = tn / (tn + fp) if tn + fp else None
    f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else None
    return sens, spec, f1


def log_loss(s: ScoredSet) -> float:
    """Mean negative log-likelihood with probabilities clamped away from 0/1."""
    if s.probs.size == 0:
        raise ValueError("empty scored set")
    p = np.clip(s.probs, LOG_CLAMP, 1.0 - LOG_CLAMP)
    y = s.labels.astype(np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def metric_report(s: ScoredSet) -> dict:
    """JSON-ready report: sensitivity, specificity, f1, log_loss, threshold, n."""
    sens, spec, f1 = sensitivity_specificity_f1(confusion(s))
    return {
        "sensitivity": sens,
        "specificity": spec,
        "f1": f1,
        "log_loss": log_loss(s),
        "threshold": s.threshold,
        "n": int(s.probs.size),
    }
