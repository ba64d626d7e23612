from .tensor import Tape, Tensor
from .functional import (
    add,
    add_bias,
    concat_channels,
    conv2d,
    fully_connected,
    max_pool2,
    relu,
    reshape,
    scale,
    smooth_l1,
    softmax,
    softmax_cross_entropy,
    split_batch,
    sum_all,
    mul_const,
    take_rows,
    transpose,
)
from .gradcheck import grad_check
from .optim import SGD, NonFiniteGradient, sgd_step

__all__ = [
    "Tape", "Tensor", "add", "add_bias", "concat_channels", "conv2d", "fully_connected",
    "max_pool2", "relu", "reshape", "scale", "smooth_l1", "softmax", "softmax_cross_entropy",
    "split_batch", "sum_all", "mul_const", "take_rows", "transpose", "grad_check", "SGD",
    "NonFiniteGradient", "sgd_step",
]
