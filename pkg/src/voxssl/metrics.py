"""Segmentation overlap (Dice) and ordinal agreement (weighted kappa)."""
from __future__ import annotations

import warnings

import numpy as np

from .errors import DegenerateMarginals, ShapeMismatch


def dice(pred: np.ndarray, truth: np.ndarray, cls: int) -> float:
    """2|P intersect T| / (|P| + |T|) for voxels of class ``cls``.

    Both masks empty for the class counts as perfect agreement (1.0).
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"mask shapes {pred.shape} vs {truth.shape}")
    p = pred == cls
    t = truth == cls
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


def dice_per_class(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> list[float]:
    return [dice(pred, truth, c) for c in range(num_classes)]


def confusion_matrix(a, b, num_classes: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64).ravel()
    b = np.asarray(b, dtype=np.int64).ravel()
    if a.shape != b.shape:
        raise ShapeMismatch(f"rating lengths {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("need at least one rating pair")
    for v in (a, b):
        if v.min() < 0 or v.max() >= num_classes:
            raise ValueError(f"ratings outside 0..{num_classes - 1}")
    idx = a * num_classes + b
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def quadratic_weighted_kappa(a, b, num_classes: int) -> float:
    """Chance-corrected agreement with squared-distance penalties.

    1 - (sum w*O) / (sum w*E), w_ij = (i-j)^2 / (C-1)^2, O the observed
    confusion matrix and E the outer product of its marginals scaled to the
    same total. When both raters emit one constant (no chance disagreement
    possible) the value is defined as 1.0 and a DegenerateMarginals warning
    is issued.
    """
    observed = confusion_matrix(a, b, num_classes)
    n = observed.sum()
    i = np.arange(num_classes, dtype=np.float64)
    w = (i[:, None] - i[None, :]) ** 2
    if num_classes > 1:
        w /= (num_classes - 1) ** 2
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / n
    denom = float((w * expected).sum())
    if denom == 0.0:
        warnings.warn("both raters constant; agreement defined as 1.0",
                      DegenerateMarginals)
        return 1.0
    return 1.0 - float((w * observed).sum()) / denom
