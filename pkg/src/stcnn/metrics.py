"""Overlap and correlation scores shared by label selection and evaluation."""
from __future__ import annotations

import numpy as np

from .autodiff import DimensionError, pearson

DEFAULT_THRESHOLD = 2.0


def binarize(values: np.ndarray, k: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Voxels whose magnitude exceeds ``k`` standard deviations of the nonzero values.

    If the nonzero values are all equal (standard deviation zero), every
    nonzero voxel is kept.
    """
    values = np.asarray(values, dtype=np.float64)
    nonzero = values[values != 0]
    if nonzero.size == 0:
        return np.zeros(values.shape, dtype=bool)
    cut = k * nonzero.std()
    if cut <= 1e-12 * np.abs(nonzero).max():
        return values != 0
    return np.abs(values) > cut


def set_jaccard(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    """Jaccard index of two boolean masks; the flag marks an empty union."""
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0, True
    return np.count_nonzero(a & b) / union, False


def overlap(a: np.ndarray, b: np.ndarray, k: float = DEFAULT_THRESHOLD) -> tuple[float, bool]:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"jaccard: map shapes differ, {a.shape} vs {b.shape}")
    return set_jaccard(binarize(a, k), binarize(b, k))


def jaccard(a: np.ndarray, b: np.ndarray, k: float = DEFAULT_THRESHOLD) -> float:
    """Overlap-over-union of the binarized maps (0 when both are empty)."""
    return overlap(a, b, k)[0]


def temporal_similarity(pred, truth) -> float:
    """Pearson correlation between two series of equal length."""
    pred, truth = np.ravel(pred), np.ravel(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"temporal_similarity: lengths {pred.size} vs {truth.size}")
    return pearson(pred, truth)


def is_constant(x) -> bool:
    x = np.ravel(x)
    return bool(np.ptp(x) <= 1e-12 * max(1.0, np.abs(x).max(initial=0.0)))
