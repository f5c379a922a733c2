"""Differentiable kernels for the SE-CNN.

Every kernel returns ``(output, pullback)``. Calling ``pullback(dy)`` with the
upstream gradient returns the gradients with respect to the kernel's array
inputs, in argument order. Pullbacks never modify ``dy`` and close over only
what the backward pass needs, so intermediate activations can be released as
soon as the caller drops them.

Kernels follow the dtype of their inputs: float32 for training, float64 for
gradient checks.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import _kernels as _k


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


Pullback = Callable[..., object]


def _check_5d(x: np.ndarray, what: str = "input") -> None:
    if x.ndim != 5:
        raise ShapeError(f"{what} must be N x C x D x H x W, got shape {x.shape}")


def conv3d_pointwise(x: np.ndarray, W: np.ndarray, b: Optional[np.ndarray] = None):
    """1x1x1 convolution: ``y[n,k] = b[k] + sum_c W[k,c] x[n,c]``."""
    _check_5d(x)
    if W.ndim != 2 or W.shape[1] != x.shape[1]:
        raise ShapeError(f"kernel {W.shape} does not accept {x.shape[1]} input channels")
    if b is not None and b.shape != (W.shape[0],):
        raise ShapeError(f"bias shape {b.shape} != ({W.shape[0]},)")
    n, cin = x.shape[:2]
    cout = W.shape[0]
    xf = x.reshape(n, cin, -1)
    if cin == 1:
        y = W[None, :, :1] * xf
    else:
        y = np.matmul(W, xf)
    if b is not None:
        y += b[:, None]
    y = y.reshape((n, cout) + x.shape[2:])

    def pullback(dy, need_dx=True):
        dyf = dy.reshape(n, cout, -1)
        dW = np.zeros_like(W)
        for i in range(n):
            dW += dyf[i] @ xf[i].T
        db = dyf.sum(axis=(0, 2)) if b is not None else None
        dx = np.matmul(W.T, dyf).reshape(x.shape) if need_dx else None
        return dx, dW, db

    return y, pullback


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics of one BN layer."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-3
    momentum: float = 0.99

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, eps: float = 1e-3, momentum: float = 0.99):
        return cls(
            np.ones(channels, dtype),
            np.zeros(channels, dtype),
            np.zeros(channels, dtype),
            np.ones(channels, dtype),
            eps,
            momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def _batchnorm(x, state: BatchNormState, mode: str, apply_relu: bool):
    _check_5d(x)
    n, c = x.shape[:2]
    if c != state.channels:
        raise ShapeError(f"batchnorm expects {state.channels} channels, got {c}")
    xf = np.ascontiguousarray(x).reshape(n, c, -1)
    gamma, beta = state.gamma, state.beta
    out = np.empty_like(xf)

    if mode == "infer":
        mean = state.running_mean.astype(np.float64)
        invstd = 1.0 / np.sqrt(state.running_var.astype(np.float64) + state.eps)
    elif mode == "train":
        mean, var = _k.channel_moments(xf)
        invstd = 1.0 / np.sqrt(var + state.eps)
        mom = state.momentum
        state.running_mean[...] = mom * state.running_mean + (1.0 - mom) * mean
        state.running_var[...] = mom * state.running_var + (1.0 - mom) * var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    scale = gamma * invstd
    y = _k.centred_affine(xf, mean, scale, beta.astype(np.float64), apply_relu, out)
    mask = y if apply_relu else xf
    m = xf.shape[0] * xf.shape[2]
    pdtype = gamma.dtype

    def pullback(dy, need_dx=True):
        dyf = np.ascontiguousarray(dy).reshape(n, c, -1)
        sum_dy, sum_dyx = _k.masked_sums(dyf, xf, mask, apply_relu)
        sum_dy_xc = sum_dyx - mean * sum_dy
        dgamma = (invstd * sum_dy_xc).astype(pdtype)
        dbeta = sum_dy.astype(pdtype)
        if not need_dx:
            return None, dgamma, dbeta
        if mode == "train":
            bcoef = -gamma * invstd**3 * sum_dy_xc / m
            ccoef = -scale * sum_dy / m - bcoef * mean
        else:
            bcoef = np.zeros(c)
            ccoef = np.zeros(c)
        dx = _k.masked_affine_grad(dyf, xf, mask, apply_relu, scale, bcoef, ccoef, np.empty_like(dyf))
        return dx.reshape(x.shape), dgamma, dbeta

    return y.reshape(x.shape), pullback


def batchnorm3d(x: np.ndarray, state: BatchNormState, mode: str = "train"):
    """Batch normalisation over (N, D, H, W) per channel.

    In ``"train"`` mode the batch statistics are used and the running
    statistics in ``state`` are updated in place by exponential moving
    average. ``"infer"`` uses the running statistics.

    The pullback returns ``(dx, dgamma, dbeta)``.
    """
    return _batchnorm(x, state, mode, False)


def batchnorm_relu3d(x: np.ndarray, state: BatchNormState, mode: str = "train"):
    """``relu(batchnorm3d(x))`` evaluated and differentiated in fused passes."""
    return _batchnorm(x, state, mode, True)


def relu(x: np.ndarray, inplace: bool = False):
    y = np.maximum(x, 0, out=x if inplace else None)

    def pullback(dy):
        if y.ndim == 5 and y.flags.c_contiguous and dy.flags.c_contiguous:
            n, c = y.shape[:2]
            return _k.relu_mask(dy.reshape(n, c, -1), y.reshape(n, c, -1), np.empty(y.shape, dy.dtype).reshape(n, c, -1)).reshape(y.shape)
        return np.where(y > 0, dy, 0).astype(dy.dtype, copy=False)

    return y, pullback


def add_relu(a: np.ndarray, b: np.ndarray, inplace: bool = False):
    """``relu(a + b)``; the pullback returns the shared gradient of both operands."""
    _check_5d(a)
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    n, c = a.shape[:2]
    a3 = np.ascontiguousarray(a).reshape(n, c, -1)
    b3 = np.ascontiguousarray(b).reshape(n, c, -1)
    out = a3 if inplace else np.empty_like(a3)
    y = _k.add_relu(a3, b3, out).reshape(a.shape)

    def pullback(dy):
        dy3 = np.ascontiguousarray(dy).reshape(n, c, -1)
        g = _k.relu_mask(dy3, y.reshape(n, c, -1), np.empty_like(dy3))
        return g.reshape(a.shape)

    return y, pullback


def sigmoid(x: np.ndarray):
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)

    def pullback(dy):
        return dy * y * (1.0 - y)

    return y, pullback


def maxpool3d_2x2x2(x: np.ndarray):
    """2x2x2 max pooling, stride 2, no padding, floor-mode extents.

    Ties route the gradient to the first maximum in x-fastest scan order of
    the window.
    """
    _check_5d(x)
    if min(x.shape[2:]) < 2:
        raise ShapeError(f"max pooling needs every spatial extent >= 2, got {x.shape[2:]}")
    od, oh, ow = (e // 2 for e in x.shape[2:])
    y = np.empty(x.shape[:2] + (od, oh, ow), dtype=x.dtype)
    arg = np.empty(y.shape, dtype=np.uint8)
    _k.maxpool_forward(np.ascontiguousarray(x), od, oh, ow, y, arg)
    in_shape = x.shape

    def pullback(dy):
        dx = np.zeros(in_shape, dtype=dy.dtype)
        return _k.maxpool_backward(np.ascontiguousarray(dy), arg, dx)

    return y, pullback


def global_avg_pool3d(x: np.ndarray):
    """Per-channel spatial mean, N x C x D x H x W -> N x C.

    The pullback accepts ``out=`` to add the spread gradient into an existing
    N x C x D x H x W buffer instead of allocating one.
    """
    _check_5d(x)
    shape = x.shape
    y = _k.channel_means(np.ascontiguousarray(x).reshape(shape[0], shape[1], -1)).astype(x.dtype)

    def pullback(dy, out=None):
        if out is None:
            out = np.zeros(shape, dtype=dy.dtype)
        _k.add_channel_constant(out.reshape(shape[0], shape[1], -1), np.asarray(dy, dtype=np.float64))
        return out

    return y, pullback


def dense(x: np.ndarray, W: np.ndarray, b: Optional[np.ndarray] = None):
    """Affine map ``y = x W^T + b`` for ``x`` of shape N x F and ``W`` of G x F.

    Rows are multiplied one at a time so each output row is independent of
    how the batch was partitioned.
    """
    if x.ndim != 2 or W.ndim != 2 or W.shape[1] != x.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise ShapeError(f"dense: bias shape {b.shape} != ({W.shape[0]},)")
    y = np.matmul(x[:, None, :], W.T)[:, 0, :]
    if b is not None:
        y += b

    def pullback(dy, need_dx=True):
        dW = dy.T @ x
        db = dy.sum(axis=0) if b is not None else None
        dx = dy @ W if need_dx else None
        return dx, dW, db

    return y, pullback


def dropout(x: np.ndarray, p: float, mode: str, rng: Optional[np.random.Generator] = None):
    """Inverted dropout: survivors are scaled by 1/(1-p) at train time."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if mode == "infer" or p == 0.0:
        return x, lambda dy: dy
    if rng is None:
        raise ValueError("train-mode dropout needs an explicit random generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    y = x * keep

    def pullback(dy):
        return dy * keep

    return y, pullback


def channel_scale(x: np.ndarray, s: np.ndarray):
    """Multiply each channel of ``x`` (N x C x ...) by ``s[n, c]``."""
    _check_5d(x)
    if s.shape != x.shape[:2]:
        raise ShapeError(f"scales {s.shape} do not match channels {x.shape[:2]}")
    n, c = s.shape
    xf = np.ascontiguousarray(x).reshape(n, c, -1)
    y = _k.scale_channels(xf, s, np.empty_like(xf))

    def pullback(dy):
        dyf = np.ascontiguousarray(dy).reshape(n, c, -1)
        dx = np.empty_like(dyf)
        ds = _k.scale_channels_backward(dyf, xf, s, dx).astype(s.dtype)
        return dx.reshape(x.shape), ds

    return y.reshape(x.shape), pullback


def add(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return a + b, lambda dy: (dy, dy)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean categorical cross-entropy of integer ``labels`` (0-based).

    Returns ``(loss, grad_logits)`` where ``grad_logits = (softmax - onehot) / N``.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be N x K, got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in 0..{k - 1}")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels]))
    grad = np.exp(z - logsum[:, None])
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad
