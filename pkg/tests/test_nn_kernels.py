"""nn-core kernels against naive loop oracles and central finite differences."""
import numpy as np
import pytest

from sltpnet import nn
from sltpnet.nn import functional as F
from sltpnet.nn import table as T

from helpers import fd_check, rel_error


def naive_conv(x, W, b):
    n, cin, d, h, w = x.shape
    y = np.zeros((n, W.shape[0], d, h, w))
    for i in range(n):
        for k in range(W.shape[0]):
            for z in range(d):
                for yy in range(h):
                    for xx in range(w):
                        acc = b[k]
                        for c in range(cin):
                            acc += W[k, c] * x[i, c, z, yy, xx]
                        y[i, k, z, yy, xx] = acc
    return y


def naive_maxpool(x):
    n, c, d, h, w = x.shape
    y = np.zeros((n, c, d // 2, h // 2, w // 2))
    for i in range(n):
        for k in range(c):
            for z in range(d // 2):
                for yy in range(h // 2):
                    for xx in range(w // 2):
                        y[i, k, z, yy, xx] = max(
                            x[i, k, 2 * z + a, 2 * yy + bb, 2 * xx + cc] for a in (0, 1) for bb in (0, 1) for cc in (0, 1)
                        )
    return y


def naive_gap(x):
    n, c = x.shape[:2]
    y = np.zeros((n, c))
    for i in range(n):
        for k in range(c):
            y[i, k] = sum(float(v) for v in x[i, k].ravel()) / x[i, k].size
    return y


def naive_dense(x, W, b):
    y = np.zeros((x.shape[0], W.shape[0]))
    for i in range(x.shape[0]):
        for g in range(W.shape[0]):
            y[i, g] = b[g] + sum(W[g, f] * x[i, f] for f in range(x.shape[1]))
    return y


def random_shape(rng):
    return (int(rng.integers(1, 4)), int(rng.integers(1, 4)), *(int(v) for v in rng.integers(2, 5, size=3)))


@pytest.mark.parametrize("case", range(100))
def test_conv_matches_loops(case):
    rng = np.random.default_rng(case)
    shape = random_shape(rng)
    cout = int(rng.integers(1, 5))
    x = rng.normal(size=shape)
    W = rng.normal(size=(cout, shape[1]))
    b = rng.normal(size=cout)
    y, _ = F.conv3d_pointwise(x, W, b)
    assert np.max(np.abs(y - naive_conv(x, W, b))) <= 1e-6


@pytest.mark.parametrize("case", range(100))
def test_pool_gap_dense_match_loops(case):
    rng = np.random.default_rng(1000 + case)
    shape = random_shape(rng)
    x = rng.normal(size=shape)
    y, _ = F.maxpool3d_2x2x2(x)
    assert np.array_equal(y, naive_maxpool(x))
    g, _ = F.global_avg_pool3d(x)
    assert np.max(np.abs(g - naive_gap(x))) <= 1e-12
    feats = int(rng.integers(1, 7))
    xd = rng.normal(size=(shape[0], feats))
    W = rng.normal(size=(int(rng.integers(1, 5)), feats))
    b = rng.normal(size=W.shape[0])
    yd, _ = F.dense(xd, W, b)
    assert np.max(np.abs(yd - naive_dense(xd, W, b))) <= 1e-12


def test_maxpool_odd_extent_floors():
    x = np.arange(5 * 4 * 3, dtype=float).reshape(1, 1, 5, 4, 3)
    y, _ = F.maxpool3d_2x2x2(x)
    assert y.shape == (1, 1, 2, 2, 1)


def test_maxpool_tie_routes_to_first():
    x = np.ones((1, 1, 2, 2, 2))
    _, pb = F.maxpool3d_2x2x2(x)
    dx = pb(np.ones((1, 1, 1, 1, 1)))
    assert dx[0, 0, 0, 0, 0] == 1 and dx.sum() == 1


def test_maxpool_rejects_small_extent():
    with pytest.raises(F.ShapeError):
        F.maxpool3d_2x2x2(np.zeros((1, 1, 1, 4, 4)))


def test_conv_channel_mismatch():
    with pytest.raises(F.ShapeError):
        F.conv3d_pointwise(np.zeros((1, 3, 2, 2, 2)), np.zeros((4, 2)), np.zeros(4))


# -- gradients -----------------------------------------------------------------


def test_conv_gradients():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 2, 3, 4))
    W = rng.normal(size=(4, 3))
    b = rng.normal(size=4)
    dy = rng.normal(size=(2, 4, 2, 3, 4))
    _, pb = F.conv3d_pointwise(x, W, b)
    dx, dW, db = pb(dy)
    f = lambda: float(np.sum(F.conv3d_pointwise(x, W, b)[0] * dy))
    for arr, g in ((x, dx), (W, dW), (b, db)):
        assert fd_check(f, arr, g) <= 1e-4


@pytest.mark.parametrize("fused", [False, True])
def test_batchnorm_gradients(fused):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 4, 2, 2, 4))  # 64 elements per channel pair
    st = F.BatchNormState.fresh(4, np.float64)
    st.gamma[:] = rng.normal(size=4)
    st.beta[:] = rng.normal(size=4)
    dy = rng.normal(size=x.shape)
    kern = F.batchnorm_relu3d if fused else F.batchnorm3d

    def f():
        s = F.BatchNormState(st.gamma, st.beta, st.running_mean.copy(), st.running_var.copy(), st.eps, st.momentum)
        return float(np.sum(kern(x, s, "train")[0] * dy))

    _, pb = kern(x, F.BatchNormState(st.gamma, st.beta, np.zeros(4), np.ones(4)), "train")
    dx, dg, dbeta = pb(dy)
    for arr, g in ((x, dx), (st.gamma, dg), (st.beta, dbeta)):
        assert fd_check(f, arr, g) <= 1e-4


def test_batchnorm_infer_gradients():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 2, 2, 2))
    st = F.BatchNormState(rng.normal(size=3), rng.normal(size=3), rng.normal(size=3), rng.uniform(0.5, 2, 3))
    dy = rng.normal(size=x.shape)
    f = lambda: float(np.sum(F.batchnorm3d(x, st, "infer")[0] * dy))
    dx, dg, db = F.batchnorm3d(x, st, "infer")[1](dy)
    for arr, g in ((x, dx), (st.gamma, dg), (st.beta, db)):
        assert fd_check(f, arr, g) <= 1e-4


def test_batchnorm_train_statistics_and_running_update():
    rng = np.random.default_rng(3)
    x = rng.normal(3.0, 2.0, size=(4, 2, 3, 3, 3))
    st = F.BatchNormState.fresh(2, np.float64)
    y, _ = F.batchnorm3d(x, st, "train")
    m = y.mean(axis=(0, 2, 3, 4))
    v = y.var(axis=(0, 2, 3, 4))
    assert np.allclose(m, 0, atol=1e-12)
    assert np.allclose(v, x.var(axis=(0, 2, 3, 4)) / (x.var(axis=(0, 2, 3, 4)) + 1e-3))
    assert np.allclose(st.running_mean, 0.01 * x.mean(axis=(0, 2, 3, 4)))
    assert np.allclose(st.running_var, 0.99 + 0.01 * x.var(axis=(0, 2, 3, 4)))


def test_batchnorm_infer_fresh_state_is_near_identity():
    x = np.random.default_rng(4).normal(size=(1, 2, 2, 2, 2))
    y, _ = F.batchnorm3d(x, F.BatchNormState.fresh(2, np.float64), "infer")
    assert np.allclose(y, x / np.sqrt(1 + 1e-3))


def test_batchnorm_channel_mismatch():
    with pytest.raises(F.ShapeError):
        F.batchnorm3d(np.zeros((1, 3, 2, 2, 2)), F.BatchNormState.fresh(2), "train")


def test_elementwise_gradients():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 2, 2, 2))
    x[np.abs(x) < 1e-3] = 0.5
    dy = rng.normal(size=x.shape)
    assert fd_check(lambda: float(np.sum(F.relu(x)[0] * dy)), x, F.relu(x)[1](dy)) <= 1e-4
    assert fd_check(lambda: float(np.sum(F.sigmoid(x)[0] * dy)), x, F.sigmoid(x)[1](dy)) <= 1e-4
    a, b = rng.normal(size=x.shape), rng.normal(size=x.shape)
    g = F.add_relu(a, b)[1](dy)
    for arr in (a, b):
        assert fd_check(lambda: float(np.sum(F.add_relu(a, b)[0] * dy)), arr, g) <= 1e-4
    ga, gb = F.add(a, b)[1](dy)
    assert np.array_equal(ga, dy) and np.array_equal(gb, dy)


def test_pool_and_gap_gradients():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 2, 4, 4, 2))
    dy = rng.normal(size=(2, 2, 2, 2, 1))
    assert fd_check(lambda: float(np.sum(F.maxpool3d_2x2x2(x)[0] * dy)), x, F.maxpool3d_2x2x2(x)[1](dy)) <= 1e-4
    dg = rng.normal(size=(2, 2))
    assert fd_check(lambda: float(np.sum(F.global_avg_pool3d(x)[0] * dg)), x, F.global_avg_pool3d(x)[1](dg)) <= 1e-4


def test_dense_and_scale_gradients():
    rng = np.random.default_rng(7)
    x, W, b = rng.normal(size=(4, 5)), rng.normal(size=(3, 5)), rng.normal(size=3)
    dy = rng.normal(size=(4, 3))
    dx, dW, db = F.dense(x, W, b)[1](dy)
    f = lambda: float(np.sum(F.dense(x, W, b)[0] * dy))
    for arr, g in ((x, dx), (W, dW), (b, db)):
        assert fd_check(f, arr, g) <= 1e-4
    v, s = rng.normal(size=(2, 3, 2, 2, 2)), rng.uniform(0.1, 0.9, size=(2, 3))
    dv = rng.normal(size=v.shape)
    gx, gs = F.channel_scale(v, s)[1](dv)
    f = lambda: float(np.sum(F.channel_scale(v, s)[0] * dv))
    assert fd_check(f, v, gx) <= 1e-4
    assert fd_check(f, s, gs) <= 1e-4


def test_dropout():
    x = np.ones((1000, 4))
    y, pb = F.dropout(x, 0.5, "train", np.random.default_rng(0))
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05
    assert np.array_equal(pb(np.ones_like(x)), y)
    yi, _ = F.dropout(x, 0.5, "infer")
    assert yi is x
    with pytest.raises(ValueError):
        F.dropout(x, 1.0, "train", np.random.default_rng(0))
    with pytest.raises(ValueError):
        F.dropout(x, 0.5, "train")


def test_softmax_cross_entropy_gradient():
    rng = np.random.default_rng(8)
    z = rng.normal(size=(4, 10))
    labels = rng.integers(0, 10, size=4)
    loss, g = F.softmax_cross_entropy(z, labels)
    assert fd_check(lambda: F.softmax_cross_entropy(z, labels)[0], z, g) <= 1e-4
    p = F.softmax(z)
    assert abs(loss + np.mean(np.log(p[np.arange(4), labels]))) < 1e-12


def test_softmax_is_stable_for_huge_logits():
    z = np.array([[1e4, -1e4, 0.0], [-1e4, -1e4, -1e4]])
    p = F.softmax(z)
    assert np.all(np.isfinite(p)) and np.allclose(p.sum(axis=1), 1.0)
    loss, g = F.softmax_cross_entropy(z, np.array([1, 2]))
    assert np.isfinite(loss) and np.all(np.isfinite(g))


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        F.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


# -- value-table layers --------------------------------------------------------


def test_value_table_conv_bn_matches_dense_path():
    rng = np.random.default_rng(9)
    x = rng.integers(0, 7, size=(2, 1, 3, 4, 4)).astype(np.float64) / 7
    W, b = rng.normal(size=(5, 1)), rng.normal(size=5)
    t, inv, counts = T.value_table(x)
    assert t.shape[0] == len(np.unique(x))
    s1 = F.BatchNormState(rng.normal(size=5), rng.normal(size=5), np.zeros(5), np.ones(5))
    s2 = F.BatchNormState(s1.gamma.copy(), s1.beta.copy(), np.zeros(5), np.ones(5))
    ref, _ = F.batchnorm_relu3d(F.conv3d_pointwise(x, W, b)[0], s1, "train")
    rows, _ = T.conv_bn(t, W, b, s2, counts, "train", True)
    got = np.moveaxis(rows[inv], -1, 1)
    assert np.max(np.abs(got - ref)) <= 1e-10
    assert np.allclose(s1.running_mean, s2.running_mean) and np.allclose(s1.running_var, s2.running_var)


def test_exports():
    assert nn.batchnorm_relu3d is F.batchnorm_relu3d
    assert nn.add_relu is F.add_relu


def test_rel_error_helper():
    assert rel_error(np.array([1.0]), np.array([1.0])) == 0.0
