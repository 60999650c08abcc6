"""Tensor engine: arrays with reverse-mode autodiff and image operators."""

from .functional import (
    BCE_EPS,
    batchnorm,
    bce_loss,
    bce_with_logits,
    bias_add,
    conv2d,
    dropout,
    maxpool2d,
    upsample2x,
)
from .gradcheck import GradcheckReport, gradcheck
from .tensor import (
    GradTape,
    Tensor,
    add,
    backward,
    concat,
    matmul,
    mean,
    mul,
    narrow,
    neg,
    no_grad,
    relu,
    reshape,
    sigmoid,
    split,
    sub,
    tanh,
    zero_grad,
)
from .tensor import sum as sum_  # noqa: F401

__all__ = [
    "BCE_EPS", "GradTape", "GradcheckReport", "Tensor", "add", "backward", "batchnorm", "bce_loss", "bce_with_logits",
    "bias_add", "concat", "conv2d", "dropout", "gradcheck", "matmul", "maxpool2d", "mean", "mul",
    "narrow", "neg", "no_grad", "relu", "reshape", "sigmoid", "split", "sub", "sum_", "tanh",
    "upsample2x", "zero_grad",
]
