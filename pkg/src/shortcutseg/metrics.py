from __future__ import annotations

import numpy as np

from .errors import DomainError


def dice(a, b) -> float:
    """Dice overlap 2|a∩b| / (|a|+|b|) of two binary masks; two empty masks score 1.0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DomainError(f"dice: shape mismatch {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def recall(pred, gt) -> float:
    """|pred∩gt| / |gt|; NaN when ``gt`` is empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DomainError(f"recall: shape mismatch {pred.shape} vs {gt.shape}")
    n = int(gt.sum())
    if n == 0:
        return float("nan")
    return int(np.logical_and(pred, gt).sum()) / n
