"""Pointwise layers evaluated on a table of distinct input values.

When a stack of 1x1x1 convolutions, batch norms and ReLUs starts from a
single-channel volume, every activation is a function of the voxel value
alone. The table form stores one row per distinct value (U x C) and weights
each row by how many voxels carry that value; batch statistics and gradients
are then exact weighted versions of their per-voxel counterparts.
"""
from __future__ import annotations

import numpy as np

from . import _kernels as _k
from .functional import BatchNormState, ShapeError


def value_table(x: np.ndarray):
    """Distinct values of ``x`` (N x 1 x D x H x W).

    Returns ``(table, inverse, counts)``: ``table`` is U x 1, ``inverse`` maps
    every voxel to its row (N x D x H x W) and ``counts`` is the float64
    multiplicity of each row.
    """
    if x.ndim != 5 or x.shape[1] != 1:
        raise ShapeError(f"value tables need a single-channel 5-D input, got {x.shape}")
    vals, inv = np.unique(x.reshape(-1), return_inverse=True)
    inv = inv.reshape((x.shape[0],) + x.shape[2:]).astype(np.int64)
    counts = np.bincount(inv.ravel(), minlength=len(vals)).astype(np.float64)
    return vals.reshape(-1, 1), inv, counts


def conv_bn(t, W, b, state: BatchNormState, counts, mode: str, apply_relu: bool):
    """Table form of ``[relu](batchnorm(conv1x1(x)))``.

    The pullback takes the row-aggregated gradient (U x Cout) and returns
    ``(dt, dW, db, dgamma, dbeta)``.
    """
    if W.shape[1] != t.shape[1]:
        raise ShapeError(f"kernel {W.shape} does not accept {t.shape[1]} channels")
    c = _k.rows_affine(t, W, b, np.empty((t.shape[0], W.shape[0]), dtype=t.dtype))
    total = counts.sum()
    if mode == "train":
        mean, var = _k.weighted_moments(c, counts)
        mom = state.momentum
        state.running_mean[...] = mom * state.running_mean + (1.0 - mom) * mean
        state.running_var[...] = mom * state.running_var + (1.0 - mom) * var
    elif mode == "infer":
        mean = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    invstd = 1.0 / np.sqrt(var + state.eps)
    gamma = state.gamma
    scale = gamma * invstd
    centred = c - mean
    y = (centred * scale + state.beta).astype(t.dtype)
    if apply_relu:
        np.maximum(y, 0, out=y)

    def pullback(g):
        if apply_relu:
            g = np.where(y > 0, g, 0)
        sum_g = g.sum(axis=0)
        s = (g * centred).sum(axis=0)
        dgamma = (invstd * s).astype(gamma.dtype)
        dbeta = sum_g.astype(gamma.dtype)
        dc = g * scale
        if mode == "train":
            dc -= counts[:, None] * (scale * sum_g / total + gamma * invstd**3 * centred * s / total)
        dc = dc.astype(t.dtype)
        dW = dc.T @ t
        db = dc.sum(axis=0)
        dt = dc @ W
        return dt, dW, db, dgamma, dbeta

    return y, pullback


def gather_means(r: np.ndarray, inv: np.ndarray) -> np.ndarray:
    """Per-sample channel means of the field ``r[inv]``."""
    n = inv.shape[0]
    return _k.gather_means(r, inv.reshape(n, -1)).astype(r.dtype)


def gather_maxpool(r: np.ndarray, inv: np.ndarray):
    """2x2x2 max pool of ``r[inv]`` laid out as N x C x D x H x W.

    Returns ``(maxima, rows)`` where ``rows`` holds the table row of each
    maximum.
    """
    n = inv.shape[0]
    od, oh, ow = (e // 2 for e in inv.shape[1:])
    if min(od, oh, ow) < 1:
        raise ShapeError(f"max pooling needs every spatial extent >= 2, got {inv.shape[1:]}")
    c = r.shape[1]
    m = np.empty((n, c, od, oh, ow), dtype=r.dtype)
    arg = np.empty((n, c, od, oh, ow), dtype=np.int32)
    _k.gather_maxpool(r, inv, od, oh, ow, m, arg)
    return m, arg


def scatter_grad(dm, arg, dz, inv, n_rows, dtype):
    """Row-aggregated gradient from pooled-max and channel-mean branches."""
    n = inv.shape[0]
    g = _k.scatter_table_grad(
        np.ascontiguousarray(dm), arg, np.asarray(dz, np.float64), inv.reshape(n, -1), n_rows
    )
    return g.astype(dtype)
