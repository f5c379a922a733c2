"""Minimal differentiable kernels, tensors and the SGD-Nesterov optimizer."""
from .functional import (
    BatchNormState,
    ShapeError,
    add,
    add_relu,
    batchnorm3d,
    batchnorm_relu3d,
    channel_scale,
    conv3d_pointwise,
    dense,
    dropout,
    global_avg_pool3d,
    maxpool3d_2x2x2,
    relu,
    sigmoid,
    softmax,
    softmax_cross_entropy,
)
from .optim import OptimizerState, sgd_nesterov_step, step_tensors
from .tensor import Tensor

__all__ = [
    "BatchNormState",
    "OptimizerState",
    "ShapeError",
    "Tensor",
    "add",
    "add_relu",
    "batchnorm3d",
    "batchnorm_relu3d",
    "channel_scale",
    "conv3d_pointwise",
    "dense",
    "dropout",
    "global_avg_pool3d",
    "maxpool3d_2x2x2",
    "relu",
    "sgd_nesterov_step",
    "sigmoid",
    "softmax",
    "softmax_cross_entropy",
    "step_tensors",
]
