"""Segmentation metrics: Dice, PR curves / average precision, OLS regression."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .inference import mean_uncertainty
from .postprocess import disruption_labels, disruption_scores, otsu_threshold


@dataclass
class PrCurve:
    """Precision/recall points at each distinct score threshold, descending."""

    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray


@dataclass
class RegressionFit:
    slope: float
    intercept: float
    r_squared: float


@dataclass
class VolumePrediction:
    """Model output for one volume: stacked per-B-scan maps."""

    volume_id: str
    mean_prob: np.ndarray  # (B, H, W)
    epistemic_std: np.ndarray  # (B, H, W)


@dataclass
class EvalReport:
    """Per-volume and pooled test metrics plus the Dice-vs-uncertainty fit."""

    volume_ids: list[str]
    dice_per_volume: list[float]
    uncertainty_per_volume: list[float]
    dice_mean: float
    dice_std: float
    photoreceptor_auc: float
    disruption_auc: float
    fit: RegressionFit
    thresholds_per_volume: list[list[float]] = field(default_factory=list)


def dice(pred: np.ndarray, truth: np.ndarray) -> float:
    """2 |A∩B| / (|A| + |B|); two empty masks count as a perfect match."""
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    a = pred.astype(bool)
    b = truth.astype(bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def pr_auc(scores: np.ndarray, labels: np.ndarray) -> tuple[PrCurve, float]:
    """Precision/recall sweep over descending score thresholds.

    Equal scores are processed as one block. The area is average precision:
    sum over blocks of (recall step) * (precision at that block).
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    positives = int(labels.sum())
    if positives == 0:
        raise ValueError("pr_auc needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    l = labels[order]
    tp = np.cumsum(l)
    rank = np.arange(1, s.size + 1)
    block_end = np.ones(s.size, dtype=bool)
    block_end[:-1] = s[:-1] != s[1:]
    tp_b = tp[block_end]
    n_b = rank[block_end]
    precision = tp_b / n_b
    recall = tp_b / positives
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    auc = float(np.sum((recall - prev_recall) * precision))
    return PrCurve(thresholds=s[block_end], precision=precision, recall=recall), auc


def disruption_auc(volumes: list[tuple[np.ndarray, np.ndarray]]) -> float:
    """Average precision over all A-scans pooled across volumes.

    Each element pairs a per-column score vector with its binary label
    vector (disrupted = positive).
    """
    if not volumes:
        raise ValueError("disruption_auc needs at least one volume")
    scores = np.concatenate([np.asarray(s, dtype=np.float64).ravel() for s, _ in volumes])
    labels = np.concatenate([np.asarray(l).ravel() for _, l in volumes])
    _, auc = pr_auc(scores, labels)
    return auc


def linear_fit(x: np.ndarray, y: np.ndarray) -> RegressionFit:
    """Ordinary least squares line with R^2 = 1 - SS_res / SS_tot.

    Constant x is rejected (no unique line); constant y fixes R^2 = 0.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError("x and y must have equal length")
    if x.size < 2:
        raise ValueError("linear_fit needs at least two points")
    xm = x.mean()
    ym = y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    if sxx == 0.0:
        raise ValueError("x is constant; slope is undefined")
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = ym - slope * xm
    ss_res = float(np.sum((y - (slope * x + intercept)) ** 2))
    ss_tot = float(np.sum((y - ym) ** 2))
    r_squared = 0.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return RegressionFit(slope=slope, intercept=float(intercept), r_squared=r_squared)


def evaluate(predictions: list[VolumePrediction], truths: list[np.ndarray]) -> EvalReport:
    """Full test-split evaluation.

    Per volume: Otsu masks per B-scan, Dice pooled over the volume's B-scans,
    mean uncertainty over the volume. Pooled: pixel-level average precision
    over the whole split, disruption average precision over all A-scans.
    The regression fits Dice against mean uncertainty across volumes.
    """
    if not predictions or len(predictions) != len(truths):
        raise ValueError("need one ground-truth stack per predicted volume")
    volume_ids = []
    dice_per_volume = []
    u_per_volume = []
    thresholds_per_volume = []
    disruption_pairs = []
    for pred, truth in zip(predictions, truths):
        if pred.mean_prob.shape != truth.shape:
            raise ValueError(f"{pred.volume_id}: prediction/truth shapes differ")
        inter = 0
        size_pred = 0
        size_truth = 0
        thresholds = []
        for prob, gt in zip(pred.mean_prob, truth):
            seg = otsu_threshold(prob)
            thresholds.append(seg.threshold)
            inter += int(np.logical_and(seg.mask, gt).sum())
            size_pred += int(seg.mask.sum())
            size_truth += int(np.asarray(gt, dtype=bool).sum())
            disruption_pairs.append((disruption_scores(prob), disruption_labels(gt)))
        denom = size_pred + size_truth
        volume_ids.append(pred.volume_id)
        dice_per_volume.append(1.0 if denom == 0 else 2.0 * inter / denom)
        u_per_volume.append(mean_uncertainty([pred.epistemic_std]))
        thresholds_per_volume.append(thresholds)
    pixel_scores = np.concatenate([p.mean_prob.ravel() for p in predictions]).astype(np.float64)
    pixel_labels = np.concatenate([np.asarray(t, dtype=bool).ravel() for t in truths]).astype(np.int64)
    _, photoreceptor_auc = pr_auc(pixel_scores, pixel_labels)
    disruption = disruption_auc(disruption_pairs)
    fit = linear_fit(np.asarray(u_per_volume), np.asarray(dice_per_volume))
    dice_arr = np.asarray(dice_per_volume)
    return EvalReport(
        volume_ids=volume_ids,
        dice_per_volume=dice_per_volume,
        uncertainty_per_volume=u_per_volume,
        dice_mean=float(dice_arr.mean()),
        dice_std=float(dice_arr.std()),
        photoreceptor_auc=photoreceptor_auc,
        disruption_auc=disruption,
        fit=fit,
        thresholds_per_volume=thresholds_per_volume,
    )
