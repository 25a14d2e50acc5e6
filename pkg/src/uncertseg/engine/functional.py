"""Forward/backward kernels for the layer set used by the segmentation nets.

Each differentiable operation is a pure function returning ``(output, cache)``
plus a matching ``*_backward(grad, cache)``. Kernels preserve the input dtype
(training runs float32; gradient checks may run them in float64). Convolutions
are stride-1 cross-correlations with zero padding, lowered to a single BLAS
matmul via an im2col copy.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..rng import RngState

TRAIN = "train"
EVAL = "eval"
MC_SAMPLE = "mc-sample"
MODES = (TRAIN, EVAL, MC_SAMPLE)


def _corr2d(x: np.ndarray, weight: np.ndarray, padding: int):
    """Raw stride-1 cross-correlation via im2col + one matmul.

    Returns the flat (N*Ho*Wo, Cout) product, the im2col matrix and (Ho, Wo).
    """
    n, cin, h, w = x.shape
    cout, _, k, _ = weight.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    ho = h + 2 * padding - k + 1
    wo = w + 2 * padding - k + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # (N, Cin, Ho, Wo, k, k)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * k * k)
    return cols @ weight.reshape(cout, -1).T, cols, (ho, wo)


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, padding: int):
    """Stride-1 2-D cross-correlation.

    x: (N, Cin, H, W); weight: (Cout, Cin, k, k) with k in {1, 3}; bias: (Cout,).
    Output spatial size is H - k + 1 + 2*padding (equal to H for k=3, pad=1
    and for k=1, pad=0).
    """
    n, cin, h, w = x.shape
    cout, cin_w, k, k2 = weight.shape
    if k != k2 or k not in (1, 3):
        raise ValueError(f"kernel must be square with size 1 or 3, got {k}x{k2}")
    if cin_w != cin:
        raise ValueError(f"input has {cin} channels but weight expects {cin_w}")
    if not 0 <= padding <= k - 1:
        raise ValueError(f"padding must be in [0, {k - 1}] for k={k}, got {padding}")
    out, cols, (ho, wo) = _corr2d(x, weight, padding)
    out += bias
    # left as a transposed view: downstream elementwise ops re-materialize it
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    cache = (x.shape, cols, weight, padding, (ho, wo))
    return out, cache


def conv2d_backward(grad_out: np.ndarray, cache):
    """Gradients of conv2d w.r.t. (input, weight, bias).

    The input gradient is itself a correlation: grad_out against the
    channel-transposed, spatially flipped weights at padding k - 1 - p.
    """
    (n, cin, h, w), cols, weight, padding, (ho, wo) = cache
    cout, _, k, _ = weight.shape
    g = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
    dweight = (g.T @ cols).reshape(weight.shape)
    dbias = g.sum(axis=0)
    w_flip = np.ascontiguousarray(weight.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    dx_flat, _, _ = _corr2d(grad_out, w_flip, k - 1 - padding)
    dx = dx_flat.reshape(n, h, w, cin).transpose(0, 3, 1, 2)
    return dx, dweight, dbias


def maxpool2(x: np.ndarray):
    """Non-overlapping 2x2 max pooling; H and W must be even."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = x.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    # argmax takes the first maximal entry, i.e. row-major order within the window
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2_backward(grad_out: np.ndarray, cache):
    (n, c, h, w), idx = cache
    h2, w2 = h // 2, w // 2
    g4 = np.zeros((n, c, h2, w2, 4), dtype=grad_out.dtype)
    np.put_along_axis(g4, idx[..., None], grad_out[..., None], axis=-1)
    return g4.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def upsample_nearest2(x: np.ndarray) -> np.ndarray:
    """Each pixel replicated into a 2x2 block."""
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample_nearest2_backward(grad_out: np.ndarray) -> np.ndarray:
    """Adjoint of replication: sum the four contributions per source pixel."""
    n, c, h2, w2 = grad_out.shape
    return grad_out.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


def batchnorm(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str,
    momentum: float = 0.1,
    eps: float = 1e-5,
):
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes with batch statistics and updates the running
    mean/variance in place (variance stored unbiased, torch convention).
    Eval and mc-sample modes normalize with the running statistics and leave
    them untouched.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    bc = (1, -1, 1, 1)
    if mode == TRAIN:
        n, _, h, w = x.shape
        count = n * h * w
        if count < 2:
            raise ValueError("batchnorm train mode needs at least 2 values per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
        xhat = (x - mean.reshape(bc)) * inv_std.reshape(bc)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (count / (count - 1))
        cache = (TRAIN, xhat, inv_std, gamma, count)
    else:
        inv_std = 1.0 / np.sqrt(running_var + np.asarray(eps, dtype=x.dtype))
        xhat = (x - running_mean.reshape(bc)) * inv_std.reshape(bc)
        cache = (mode, xhat, inv_std, gamma, 0)
    out = gamma.reshape(bc) * xhat + beta.reshape(bc)
    return out, cache


def batchnorm_backward(grad_out: np.ndarray, cache):
    """Gradients w.r.t. (input, gamma, beta).

    Train mode differentiates through the batch statistics; eval/mc-sample
    treat the running statistics as constants.
    """
    mode, xhat, inv_std, gamma, count = cache
    bc = (1, -1, 1, 1)
    dgamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    dbeta = grad_out.sum(axis=(0, 2, 3))
    dxhat = grad_out * gamma.reshape(bc)
    if mode != TRAIN:
        return dxhat * inv_std.reshape(bc), dgamma, dbeta
    sum_dxhat = dxhat.sum(axis=(0, 2, 3)).reshape(bc)
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(bc)
    dx = (inv_std.reshape(bc) / count) * (count * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    return dx, dgamma, dbeta


def leaky_relu(x: np.ndarray, slope: float):
    """x if x > 0 else slope * x. The x == 0 branch takes the slope."""
    if slope < 0:
        raise ValueError("slope must be non-negative")
    pos = x > 0
    out = np.where(pos, x, np.asarray(slope, dtype=x.dtype) * x)
    return out, (pos, slope)


def leaky_relu_backward(grad_out: np.ndarray, cache):
    pos, slope = cache
    return np.where(pos, grad_out, np.asarray(slope, dtype=grad_out.dtype) * grad_out)


def dropout(x: np.ndarray, p: float, rng: RngState | None, active: bool):
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Inactive calls are the identity and consume no randomness. Active calls
    always draw one uniform per element (even at p == 0) so stream positions
    do not depend on the rate.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not active:
        return x, None
    if rng is None:
        raise ValueError("active dropout requires an RngState")
    keep = rng.uniform(x.shape) >= p
    mask = keep.astype(x.dtype)
    mask *= 1.0 / (1.0 - p)
    return x * mask, mask


def dropout_backward(grad_out: np.ndarray, cache):
    return grad_out if cache is None else grad_out * cache


def softmax_cross_entropy(logits: np.ndarray, target: np.ndarray):
    """Mean per-pixel 2-class cross entropy.

    logits: (N, C, H, W); target: (N, H, W) integer class indices. The
    per-pixel log-sum-exp is computed in a max-shifted form; the scalar mean
    accumulates in float64.
    """
    n, c, h, w = logits.shape
    if target.shape != (n, h, w):
        raise ValueError(f"target shape {target.shape} does not match logits {logits.shape}")
    t = target.astype(np.int64)
    if t.min() < 0 or t.max() >= c:
        raise ValueError("target labels out of range")
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    ez = np.exp(z)
    se = ez.sum(axis=1, keepdims=True)
    log_probs = z - np.log(se)
    picked = np.take_along_axis(log_probs, t[:, None], axis=1)
    count = n * h * w
    loss = float(-picked.sum(dtype=np.float64) / count)
    probs = ez / se
    return loss, (probs, t, count)


def softmax_cross_entropy_backward(cache) -> np.ndarray:
    """(softmax - one_hot) / pixel_count, the gradient of the mean loss."""
    probs, t, count = cache
    grad = probs.copy()
    np.put_along_axis(
        grad,
        t[:, None],
        np.take_along_axis(grad, t[:, None], axis=1) - np.asarray(1.0, dtype=grad.dtype),
        axis=1,
    )
    grad /= count
    return grad


def foreground_probability(logits: np.ndarray) -> np.ndarray:
    """Softmax probability of channel 1 for 2-channel logits, numerically stable."""
    d = logits[:, 1] - logits[:, 0]
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ed = np.exp(d[~pos])
    out[~pos] = ed / (1.0 + ed)
    return out
