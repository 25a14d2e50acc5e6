"""Central finite-difference gradients, the oracle for backward passes."""

from __future__ import annotations

import numpy as np


def finite_difference_gradient(f, x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Numerical gradient of scalar-valued ``f`` at ``x`` by central differences.

    Evaluates ``f`` 2 * x.size times in float64. Independent of any analytic
    backward pass: it only perturbs inputs and differences outputs.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def assert_gradients_close(
    analytic: np.ndarray,
    numeric: np.ndarray,
    rtol: float = 1e-3,
    atol: float = 1e-6,
    label: str = "",
) -> None:
    """Elementwise |a - n| <= rtol * max(|a|, |n|) + atol, or raise."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    if a.shape != b.shape:
        raise AssertionError(f"{label}: shape mismatch {a.shape} vs {b.shape}")
    err = np.abs(a - b) - rtol * np.maximum(np.abs(a), np.abs(b)) - atol
    if err.max() > 0:
        worst = np.unravel_index(np.argmax(err), err.shape)
        raise AssertionError(
            f"{label}: gradient mismatch at {worst}: analytic={a[worst]!r} "
            f"numeric={b[worst]!r}"
        )
