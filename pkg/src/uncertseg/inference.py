"""Monte-Carlo-dropout inference: mean probability and epistemic std maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import functional as F
from .model import Network
from .rng import RngState


@dataclass
class McResult:
    """Pixel-wise mean foreground probability and epistemic standard deviation."""

    mean_prob: np.ndarray
    epistemic_std: np.ndarray
    samples: int


def _chunk_size(net: Network, h: int, w: int) -> int:
    """Scans per forward pass, sized to keep im2col buffers cache-friendly."""
    return max(1, min(16, 16_000_000 // (h * w * max(net.spec.base_channels, 1))))


def predict_stack(net: Network, images: np.ndarray, samples: int, rng: RngState):
    """MC-dropout prediction over a stack of B-scans.

    images: (K, 1, H, W). Runs ``samples`` stochastic forward passes in
    mc-sample mode; pass i draws from the derived stream ``rng.derive(i)``.
    Returns (mean_prob, epistemic_std), each (K, H, W) float32.
    The std is the population standard deviation across samples (divisor T),
    accumulated in float64 in fixed pass order so results are bit-stable.
    Large stacks are processed in fixed-size chunks; each sample stream is
    consumed chunk by chunk in order, so results depend only on the inputs,
    the seed and the sample count.
    """
    if samples < 1:
        raise ValueError("sample count must be >= 1")
    if images.ndim != 4:
        raise ValueError(f"expected (K, 1, H, W) images, got shape {images.shape}")
    previous = net.mode
    net.set_mode(F.MC_SAMPLE)
    try:
        k, _, h, w = images.shape
        streams = [rng.derive(i) for i in range(samples)]
        acc = np.zeros((k, h, w), dtype=np.float64)
        acc_sq = np.zeros((k, h, w), dtype=np.float64)
        chunk = _chunk_size(net, h, w)
        for start in range(0, k, chunk):
            sl = slice(start, min(start + chunk, k))
            part = np.ascontiguousarray(images[sl])
            for i in range(samples):
                logits = net.forward(part, streams[i])
                prob = F.foreground_probability(logits[:, :2]).astype(np.float64)
                acc[sl] += prob
                acc_sq[sl] += prob * prob
    finally:
        net.set_mode(previous)
    mean = acc / samples
    var = np.maximum(acc_sq / samples - mean * mean, 0.0)
    return mean.astype(np.float32), np.sqrt(var).astype(np.float32)


def mc_predict(net: Network, bscan: np.ndarray, samples: int, rng: RngState) -> McResult:
    """MC-dropout prediction for one B-scan (1, H, W)."""
    if bscan.ndim != 3:
        raise ValueError(f"expected a (1, H, W) B-scan, got shape {bscan.shape}")
    mean, std = predict_stack(net, bscan[None], samples, rng)
    return McResult(mean_prob=mean[0], epistemic_std=std[0], samples=samples)


def deterministic_probability(net: Network, images: np.ndarray) -> np.ndarray:
    """Eval-mode foreground probability for a stack (K, 1, H, W) -> (K, H, W)."""
    previous = net.mode
    net.set_mode(F.EVAL)
    try:
        k, _, h, w = images.shape
        out = np.empty((k, h, w), dtype=np.float32)
        chunk = _chunk_size(net, h, w)
        for start in range(0, k, chunk):
            sl = slice(start, min(start + chunk, k))
            logits = net.forward(np.ascontiguousarray(images[sl]))
            out[sl] = F.foreground_probability(logits[:, :2]).astype(np.float32)
    finally:
        net.set_mode(previous)
    return out


def normalize_uncertainty(umap: np.ndarray) -> np.ndarray:
    """Divide by the map maximum; an all-zero map is returned unchanged."""
    peak = float(umap.max()) if umap.size else 0.0
    if peak <= 0.0:
        return umap.copy()
    return (umap / peak).astype(umap.dtype)


def mean_uncertainty(maps: list[np.ndarray]) -> float:
    """Arithmetic mean over every pixel of every map."""
    if not maps:
        raise ValueError("mean_uncertainty needs at least one map")
    total = sum(float(m.sum(dtype=np.float64)) for m in maps)
    count = sum(m.size for m in maps)
    return total / count
