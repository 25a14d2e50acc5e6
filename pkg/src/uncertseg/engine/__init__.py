"""Minimal reverse-mode tensor engine: layer kernels, Adam, gradient checks."""

from .functional import (
    EVAL,
    MC_SAMPLE,
    MODES,
    TRAIN,
    batchnorm,
    batchnorm_backward,
    conv2d,
    conv2d_backward,
    dropout,
    dropout_backward,
    foreground_probability,
    leaky_relu,
    leaky_relu_backward,
    maxpool2,
    maxpool2_backward,
    softmax_cross_entropy,
    softmax_cross_entropy_backward,
    upsample_nearest2,
    upsample_nearest2_backward,
)
from .gradcheck import assert_gradients_close, finite_difference_gradient
from .optim import Parameter, adam_step

__all__ = [
    "EVAL",
    "MC_SAMPLE",
    "MODES",
    "TRAIN",
    "Parameter",
    "adam_step",
    "assert_gradients_close",
    "batchnorm",
    "batchnorm_backward",
    "conv2d",
    "conv2d_backward",
    "dropout",
    "dropout_backward",
    "finite_difference_gradient",
    "foreground_probability",
    "leaky_relu",
    "leaky_relu_backward",
    "maxpool2",
    "maxpool2_backward",
    "softmax_cross_entropy",
    "softmax_cross_entropy_backward",
    "upsample_nearest2",
    "upsample_nearest2_backward",
]
