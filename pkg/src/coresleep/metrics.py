"""Confusion-matrix based scoring: accuracy, Cohen's kappa, macro-F1."""
from __future__ import annotations

import numpy as np

from .config import LABELS
from .errors import DataError

N = len(LABELS)


def confusion_matrix(true, pred, n_classes: int = N) -> np.ndarray:
    """Rows are true labels, columns predictions."""
    true = np.asarray(true, dtype=np.int64).ravel()
    pred = np.asarray(pred, dtype=np.int64).ravel()
    if true.shape != pred.shape:
        raise DataError(f"{true.size} true labels vs {pred.size} predictions")
    if true.size and (min(true.min(), pred.min()) < 0 or max(true.max(), pred.max()) >= n_classes):
        raise DataError(f"labels must lie in [0, {n_classes})")
    return np.bincount(true * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def _checked(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise DataError(f"confusion matrix must be square, got {cm.shape}")
    if (cm < 0).any():
        raise DataError("confusion matrix has negative counts")
    if cm.sum() <= 0:
        raise DataError("confusion matrix is empty")
    return cm.astype(np.float64)


def accuracy(cm) -> float:
    cm = _checked(cm)
    return float(100.0 * np.trace(cm) / cm.sum())


def cohen_kappa(cm) -> float:
    cm = _checked(cm)
    n = cm.sum()
    p_o = np.trace(cm) / n
    p_e = float(cm.sum(axis=1) @ cm.sum(axis=0)) / (n * n)
    if p_e == 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def per_label_f1(cm) -> np.ndarray:
    """F1 per label in [0, 1]; a label with no true and no predicted windows scores 0."""
    cm = _checked(cm)
    tp = np.diag(cm)
    denom = cm.sum(axis=0) + cm.sum(axis=1)  # 2tp + fp + fn
    return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def macro_f1(cm) -> float:
    return 100.0 * float(per_label_f1(cm).mean())


def summarize(cm) -> dict[str, float]:
    return {"accuracy": accuracy(cm), "kappa": cohen_kappa(cm), "macro_f1": macro_f1(cm)}
