"""Trainable parameter container and the Adam update."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Parameter:
    """A float32 value with its gradient and Adam moment buffers.

    All four arrays share one shape; grad/m/v start at zero.
    """

    value: np.ndarray
    name: str = ""
    grad: np.ndarray = field(init=False)
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=np.float32)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)


def adam_step(
    params: list[Parameter],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    t: int = 1,
) -> None:
    """One bias-corrected Adam step over ``params``; zeroes gradients after.

    Weight decay is the classic L2 coupling: decay is added to the gradient
    before the moment updates (not decoupled).
    """
    if t < 1:
        raise ValueError("step index t must be >= 1")
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for p in params:
        g = p.grad
        if weight_decay:
            g = g + np.float32(weight_decay) * p.value
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * (g * g)
        mhat = p.m / bc1
        vhat = p.v / bc2
        p.value -= np.float32(lr) * mhat / (np.sqrt(vhat) + np.float32(eps))
        p.grad[...] = 0.0
