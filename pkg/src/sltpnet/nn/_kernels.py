"""Single-pass loops over N x C x V activations.

Reductions accumulate in float64. The compiled summation order is fixed, so
repeated calls on the same data agree bit for bit, and per-sample reductions do
not depend on how the caller partitions a batch.
"""
import numpy as np
from numba import njit

# reassociation lets reductions vectorise; no NaN/inf assumptions are made
_FAST = {"reassoc", "contract", "nsz", "arcp"}


@njit(cache=True, fastmath=_FAST)
def channel_moments(x):
    """Per-channel mean and (biased) variance over axes 0 and 2."""
    n, c, v = x.shape
    mean = np.zeros(c)
    var = np.zeros(c)
    m = n * v
    for k in range(c):
        s = 0.0
        for i in range(n):
            for j in range(v):
                s += x[i, k, j]
        mu = s / m
        q = 0.0
        for i in range(n):
            for j in range(v):
                d = x[i, k, j] - mu
                q += d * d
        mean[k] = mu
        var[k] = q / m
    return mean, var


@njit(cache=True, fastmath=_FAST)
def centred_affine(x, mean, scale, shift, apply_relu, out):
    """``out = scale[c] * (x - mean[c]) + shift[c]``, optionally rectified."""
    n, c, v = x.shape
    for i in range(n):
        for k in range(c):
            mu = mean[k]
            a = scale[k]
            b = shift[k]
            for j in range(v):
                y = a * (x[i, k, j] - mu) + b
                if apply_relu and y < 0:
                    y = 0
                out[i, k, j] = y
    return out


@njit(cache=True, fastmath=_FAST)
def masked_sums(dy, x, mask, use_mask):
    """Per-channel ``sum(g)`` and ``sum(g * x)`` with ``g = dy * [mask > 0]``."""
    n, c, v = dy.shape
    s_dy = np.zeros(c)
    s_dyx = np.zeros(c)
    for k in range(c):
        a = 0.0
        b = 0.0
        for i in range(n):
            for j in range(v):
                if use_mask and not mask[i, k, j] > 0:
                    continue
                g = dy[i, k, j]
                a += g
                b += g * x[i, k, j]
        s_dy[k] = a
        s_dyx[k] = b
    return s_dy, s_dyx


@njit(cache=True, fastmath=_FAST)
def masked_affine_grad(dy, x, mask, use_mask, a, b, c, out):
    """``out = a[c] * g + b[c] * x + c[c]`` with ``g = dy * [mask > 0]``."""
    n, ch, v = dy.shape
    for i in range(n):
        for k in range(ch):
            ak = a[k]
            bk = b[k]
            ck = c[k]
            for j in range(v):
                g = dy[i, k, j]
                if use_mask and not mask[i, k, j] > 0:
                    g = 0
                out[i, k, j] = ak * g + bk * x[i, k, j] + ck
    return out


@njit(cache=True, fastmath=_FAST)
def relu_mask(dy, y, out):
    n, c, v = dy.shape
    for i in range(n):
        for k in range(c):
            for j in range(v):
                out[i, k, j] = dy[i, k, j] if y[i, k, j] > 0 else 0
    return out


@njit(cache=True, fastmath=_FAST)
def add_relu(a, b, out):
    n, c, v = a.shape
    for i in range(n):
        for k in range(c):
            for j in range(v):
                y = a[i, k, j] + b[i, k, j]
                out[i, k, j] = y if y > 0 else 0
    return out


@njit(cache=True, fastmath=_FAST)
def maxpool_forward(x, od, oh, ow, y, arg):
    """2x2x2 stride-2 max; ``arg`` keeps the first maximum in x-fastest order."""
    n, c = x.shape[0], x.shape[1]
    for i in range(n):
        for k in range(c):
            for z in range(od):
                for r in range(oh):
                    for q in range(ow):
                        best = x[i, k, 2 * z, 2 * r, 2 * q]
                        bi = 0
                        for t in range(1, 8):
                            v = x[i, k, 2 * z + (t >> 2), 2 * r + ((t >> 1) & 1), 2 * q + (t & 1)]
                            if v > best:
                                best = v
                                bi = t
                        y[i, k, z, r, q] = best
                        arg[i, k, z, r, q] = bi
    return y


@njit(cache=True, fastmath=_FAST)
def maxpool_backward(dy, arg, dx):
    n, c, od, oh, ow = dy.shape
    for i in range(n):
        for k in range(c):
            for z in range(od):
                for r in range(oh):
                    for q in range(ow):
                        t = arg[i, k, z, r, q]
                        dx[i, k, 2 * z + (t >> 2), 2 * r + ((t >> 1) & 1), 2 * q + (t & 1)] = dy[i, k, z, r, q]
    return dx


@njit(cache=True, fastmath=_FAST)
def channel_means(x):
    n, c, v = x.shape
    out = np.zeros((n, c))
    for i in range(n):
        for k in range(c):
            s = 0.0
            for j in range(v):
                s += x[i, k, j]
            out[i, k] = s / v
    return out


@njit(cache=True, fastmath=_FAST)
def scale_channels(x, s, out):
    n, c, v = x.shape
    for i in range(n):
        for k in range(c):
            a = s[i, k]
            for j in range(v):
                out[i, k, j] = a * x[i, k, j]
    return out


@njit(cache=True, fastmath=_FAST)
def scale_channels_backward(dy, x, s, out):
    """Gradient of ``y = s * x``: writes ``out = s * dy``, returns ``sum(dy * x)``."""
    n, c, v = dy.shape
    ds = np.zeros((n, c))
    for i in range(n):
        for k in range(c):
            a = s[i, k]
            acc = 0.0
            for j in range(v):
                g = dy[i, k, j]
                acc += g * x[i, k, j]
                out[i, k, j] = a * g
            ds[i, k] = acc
    return ds


@njit(cache=True, fastmath=_FAST)
def add_channel_constant(out, dz):
    n, c, v = out.shape
    for i in range(n):
        for k in range(c):
            g = dz[i, k] / v
            for j in range(v):
                out[i, k, j] += g
    return out


# -- value-table kernels: activations stored once per distinct input value ------


@njit(cache=True, fastmath=_FAST)
def rows_affine(t, W, b, out):
    """``out[u] = W @ t[u] + b`` row by row; each row's result depends only on ``t[u]``."""
    u_n, cin = t.shape
    cout = W.shape[0]
    for u in range(u_n):
        for k in range(cout):
            acc = 0.0
            for c in range(cin):
                acc += W[k, c] * t[u, c]
            out[u, k] = acc + b[k]
    return out


@njit(cache=True, fastmath=_FAST)
def weighted_moments(t, w):
    """Column mean and biased variance of ``t`` (U x C) with row weights ``w``."""
    u_n, c = t.shape
    total = 0.0
    for u in range(u_n):
        total += w[u]
    mean = np.zeros(c)
    var = np.zeros(c)
    for u in range(u_n):
        for k in range(c):
            mean[k] += w[u] * t[u, k]
    for k in range(c):
        mean[k] /= total
    for u in range(u_n):
        for k in range(c):
            d = t[u, k] - mean[k]
            var[k] += w[u] * d * d
    for k in range(c):
        var[k] /= total
    return mean, var


@njit(cache=True, fastmath=_FAST)
def gather_means(r, inv):
    """``out[n, c] = mean_v r[inv[n, v], c]``."""
    n, v = inv.shape
    c = r.shape[1]
    out = np.zeros((n, c))
    acc = np.zeros(c)
    for i in range(n):
        acc[:] = 0.0
        for j in range(v):
            u = inv[i, j]
            for k in range(c):
                acc[k] += r[u, k]
        for k in range(c):
            out[i, k] = acc[k] / v
    return out


@njit(cache=True)
def gather_maxpool(r, inv, od, oh, ow, m, arg):
    """2x2x2 max pooling of the gathered field ``r[inv[n, z, y, x], c]``.

    ``m`` (N x C x od x oh x ow) receives the maxima and ``arg`` the table
    row holding each maximum; ties keep the first voxel in x-fastest order.
    """
    n = inv.shape[0]
    c = r.shape[1]
    rows = np.empty(8, dtype=np.int64)
    for i in range(n):
        for z in range(od):
            for y in range(oh):
                for x in range(ow):
                    for t in range(8):
                        rows[t] = inv[i, 2 * z + (t >> 2), 2 * y + ((t >> 1) & 1), 2 * x + (t & 1)]
                    for k in range(c):
                        best = r[rows[0], k]
                        bu = rows[0]
                        for t in range(1, 8):
                            val = r[rows[t], k]
                            if val > best:
                                best = val
                                bu = rows[t]
                        m[i, k, z, y, x] = best
                        arg[i, k, z, y, x] = bu
    return m


@njit(cache=True)
def scatter_table_grad(dm, arg, dz, inv, n_rows):
    """Aggregate voxel gradients onto table rows.

    ``dm`` routes through the pooled maxima (rows ``arg``); ``dz`` (N x C) is
    spread uniformly over every voxel of its sample, as a channel mean does.
    """
    n, c = dm.shape[0], dm.shape[1]
    g = np.zeros((n_rows, c))
    flat_dm = dm.reshape(n, c, -1)
    flat_arg = arg.reshape(n, c, -1)
    p = flat_dm.shape[2]
    for i in range(n):
        for k in range(c):
            for j in range(p):
                g[flat_arg[i, k, j], k] += flat_dm[i, k, j]
    v = inv.shape[1]
    for i in range(n):
        for j in range(v):
            u = inv[i, j]
            for k in range(c):
                g[u, k] += dz[i, k] / v
    return g
