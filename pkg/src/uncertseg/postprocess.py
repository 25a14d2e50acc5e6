"""Probability maps to binary masks (Otsu) and per-column disruption scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OTSU_BINS = 256


@dataclass
class SegmentationMask:
    """Binary foreground mask with the threshold that produced it."""

    mask: np.ndarray
    threshold: float
    degenerate: bool = False


def _histogram_bins(prob: np.ndarray) -> np.ndarray:
    if prob.size == 0:
        raise ValueError("cannot threshold an empty map")
    if prob.min() < 0.0 or prob.max() > 1.0:
        raise ValueError("probability values must lie in [0, 1]")
    return np.minimum((prob * OTSU_BINS).astype(np.int64), OTSU_BINS - 1)


def otsu_threshold(prob: np.ndarray) -> SegmentationMask:
    """Binarize by maximizing between-class variance on a 256-bin histogram.

    The split search compares exact integer cross-products, so the selected
    threshold is bit-stable and independent of summation order; ties go to
    the lowest threshold. Pixels strictly above the threshold are foreground.
    A map whose values all fall in one bin has no valid split: it yields an
    all-background mask flagged degenerate, with the map mean as threshold.
    """
    bins = _histogram_bins(prob)
    counts = np.bincount(bins.ravel(), minlength=OTSU_BINS).tolist()
    total = int(prob.size)
    s_total = sum(i * c for i, c in enumerate(counts))

    best_k = -1
    best_num = 0  # maximize (s0*n1 - s1*n0)^2 / (n0*n1) over splits k
    best_den = 1
    n0 = 0
    s0 = 0
    for k in range(OTSU_BINS):
        n0 += counts[k]
        s0 += k * counts[k]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        a = s0 * n1 - (s_total - s0) * n0
        num = a * a
        den = n0 * n1
        if best_k < 0 or num * best_den > best_num * den:
            best_k, best_num, best_den = k, num, den

    if best_k < 0:
        return SegmentationMask(
            mask=np.zeros(prob.shape, dtype=np.uint8),
            threshold=float(prob.mean(dtype=np.float64)),
            degenerate=True,
        )
    threshold = (best_k + 1) / OTSU_BINS
    return SegmentationMask(mask=(prob > threshold).astype(np.uint8), threshold=threshold)


def disruption_scores(prob: np.ndarray) -> np.ndarray:
    """Per-column score 1 - max(foreground probability) for an (H, W) map."""
    if prob.ndim != 2:
        raise ValueError(f"expected an (H, W) map, got shape {prob.shape}")
    if prob.size and (prob.min() < 0.0 or prob.max() > 1.0):
        raise ValueError("probability values must lie in [0, 1]")
    return (1.0 - prob.max(axis=0)).astype(np.float64)


def disruption_labels(mask: np.ndarray) -> np.ndarray:
    """Column label 1 iff the annotation contains no foreground in that column."""
    if mask.ndim != 2:
        raise ValueError(f"expected an (H, W) mask, got shape {mask.shape}")
    return (mask.sum(axis=0) == 0).astype(np.uint8)
