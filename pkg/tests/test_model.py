import numpy as np
import pytest

from sltpnet import model as M
from sltpnet.nn import functional as F

from helpers import numeric_grad, rel_error


def analytic_counts(channels=(64, 128, 256, 512), r=16, cin=1, fc=(512, 128), k=10, edge=36, se_bias=False):
    """Independent parameter-count oracle (trainable per group, non-trainable)."""
    groups, frozen = [], 0
    for c in channels:
        convs = (cin * c + c) + (c * c + c) + (cin * c + c)
        bns = 3 * 2 * c
        mid = c // r
        se = 2 * c * mid + ((mid + c) if se_bias else 0)
        groups.append(convs + bns + se)
        frozen += 3 * 2 * c
        cin = c
        edge //= 2
    fin = channels[-1] * edge**3
    for w in fc:
        groups.append(fin * w + w)
        fin = w
    groups.append(fin * k + k)
    return groups, frozen


@pytest.fixture(scope="module")
def weights():
    return M.build_model(seed=0)


def test_parameter_totals(weights):
    trainable, frozen = M.count_parameters(weights)
    assert (trainable, frozen) == (2_909_130, 5_760)
    assert trainable + frozen == M.PAPER_TOTAL_PARAMS


def test_breakdown_matches_oracle(weights):
    groups, frozen = analytic_counts()
    assert list(M.parameter_breakdown(weights).values()) == groups
    assert frozen == 5_760
    assert groups[4:] == [2_097_664, 65_664, 1_290]


def test_listed_block_breakdown_is_the_se_bias_variant():
    # the published per-block figures include SE biases; with them the total overshoots
    groups, _ = analytic_counts(se_bias=True)
    assert groups[:4] == [5_380, 36_104, 141_840, 562_208]
    assert sum(groups) + 5_760 != M.PAPER_TOTAL_PARAMS


def test_build_is_deterministic():
    a, b = M.build_model(seed=3), M.build_model(seed=3)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a.tensors)


def test_config_validation():
    with pytest.raises(M.ConfigError):
        M.SECNNConfig(se_reduction=7).validate()
    with pytest.raises(M.ConfigError):
        M.SECNNConfig(block_channels=(64, 100)).validate()
    with pytest.raises(M.ConfigError):
        M.SECNNConfig(input_edge=8).validate()


def test_shape_chain(weights):
    trace = []
    x = np.random.default_rng(0).random((2, 1, 36, 36, 36), dtype=np.float32)
    p = M.forward(weights, x, "infer", trace=trace)
    shapes = dict(trace)
    assert [shapes[f"block{i}"][2] for i in range(1, 5)] == [18, 9, 4, 2]
    assert shapes["input"][2:] == (36, 36, 36)
    assert shapes["flatten"] == (2, 4096)
    assert p.shape == (2, 10)
    assert np.allclose(p.sum(axis=1), 1, atol=1e-5) and np.all(p >= 0)


def test_wrong_input_rejected(weights):
    with pytest.raises(F.ShapeError):
        M.forward(weights, np.zeros((1, 1, 32, 32, 32), np.float32))
    with pytest.raises(F.ShapeError):
        M.forward(weights, np.zeros((1, 2, 36, 36, 36), np.float32))


def test_infer_is_pure_and_batch_invariant(weights):
    x = np.random.default_rng(1).random((3, 1, 36, 36, 36), dtype=np.float32)
    a = M.forward(weights, x, "infer")
    assert np.array_equal(a, M.forward(weights, x, "infer"))
    dup = M.forward(weights, np.concatenate([x[:1], x[:1]]), "infer")
    assert np.array_equal(dup[0], dup[1])
    assert np.array_equal(M.predict(weights, x), M.predict(weights, x, batch_size=1))


def test_predict_tie_and_argmax():
    w = M.build_model(seed=0)
    w["classifier.weight"].data[:] = 0
    x = np.random.default_rng(2).random((2, 1, 36, 36, 36), dtype=np.float32)
    assert list(M.predict(w, x)) == [1, 1]
    w["classifier.bias"].data[6] = 5.0
    assert list(M.predict(w, x)) == [7, 7]


def test_predict_equals_argmax_oracle(weights):
    x = np.random.default_rng(3).random((4, 1, 36, 36, 36), dtype=np.float32)
    p = M.forward(weights, x, "infer")
    assert np.array_equal(M.predict(weights, x), np.argmax(p, axis=1) + 1)


def small_config():
    return M.SECNNConfig(input_edge=4, block_channels=(4, 8), se_reduction=2, fc_widths=(6,), dropout_p=0.0)


@pytest.mark.parametrize("mode", ["train", "infer"])
def test_residual_and_se_blocks_against_composition(mode):
    rng = np.random.default_rng(4)
    w = M.build_model(small_config(), seed=1).astype(np.float64)
    x = rng.normal(size=(2, 4, 2, 2, 2))
    y, _ = M.residual_block(x, w, "block2.res", mode)
    ws = M.build_model(small_config(), seed=1).astype(np.float64)

    def cbn(v, conv, bn, relu):
        c, _ = F.conv3d_pointwise(v, ws[f"{conv}.weight"].data, ws[f"{conv}.bias"].data)
        out, _ = (F.batchnorm_relu3d if relu else F.batchnorm3d)(c, ws.bn_state(bn), mode)
        return out

    left = cbn(cbn(x, "block2.res.conv1", "block2.res.bn1", True), "block2.res.conv2", "block2.res.bn2", False)
    right = cbn(x, "block2.res.shortcut", "block2.res.bn_shortcut", False)
    assert np.max(np.abs(y - np.maximum(left + right, 0))) <= 1e-12

    v = rng.normal(size=(2, 8, 2, 2, 2))
    ys, _ = M.se_block(v, w, "block2.se")
    z = v.mean(axis=(2, 3, 4))
    s = 1 / (1 + np.exp(-(np.maximum(z @ w["block2.se.down.weight"].data.T, 0) @ w["block2.se.up.weight"].data.T)))
    assert np.max(np.abs(ys - v * s[:, :, None, None, None])) <= 1e-12
    assert np.all(np.abs(ys) <= np.abs(v))


def test_se_zero_weights_halves():
    w = M.build_model(small_config(), seed=0).astype(np.float64)
    w["block2.se.down.weight"].data[:] = 0
    w["block2.se.up.weight"].data[:] = 0
    v = np.random.default_rng(5).normal(size=(1, 8, 2, 2, 2))
    assert np.allclose(M.se_block(v, w, "block2.se")[0], 0.5 * v)


@pytest.mark.parametrize("mode", ["train", "infer"])
def test_value_table_stem_equals_generic_path(mode):
    rng = np.random.default_rng(6)
    w1 = M.build_model(seed=2).astype(np.float64)
    w2 = M.build_model(seed=2).astype(np.float64)
    for name in w1.tensors:
        if name.startswith("block1") and name.endswith(("beta", "running_mean", "running_var")):
            v = rng.uniform(0.5, 1.5, size=w1[name].shape)
            w1[name].data[:] = v
            w2[name].data[:] = v
    x = rng.integers(0, 50, size=(2, 1, 36, 36, 36)) / 50.0
    y1, _ = M.stem_block(x, w1, "block1", mode)
    h, _ = M.residual_block(x, w2, "block1.res", mode)
    h, _ = M.se_block(h, w2, "block1.se")
    y2, _ = F.maxpool3d_2x2x2(h)
    assert rel_error(y1, y2) <= 1e-10
    for name in w1.tensors:
        assert np.allclose(w1[name].data, w2[name].data, atol=1e-12)


def test_full_model_gradient_spot_check():
    rng = np.random.default_rng(7)
    w = M.build_model(seed=5).astype(np.float64)
    w.config = M.SECNNConfig(dropout_p=0.5)
    x = rng.integers(0, 40, size=(1, 1, 36, 36, 36)) / 40.0
    labels = np.array([3])

    def loss():
        snap = {k: t.data.copy() for k, t in w.tensors.items() if not t.trainable}
        val, _ = M.loss_and_gradients(w, x, labels, np.random.default_rng(11), mode="train")
        for k, v in snap.items():
            w[k].data[...] = v
        w.zero_grad()
        return val

    snap = {k: t.data.copy() for k, t in w.tensors.items() if not t.trainable}
    w.zero_grad()
    M.loss_and_gradients(w, x, labels, np.random.default_rng(11), mode="train")
    grads = {k: t.grad.copy() for k, t in w.tensors.items() if t.trainable}
    for k, v in snap.items():
        w[k].data[...] = v
    w.zero_grad()

    names = sorted(grads)
    picks = []
    for name in names:
        g = grads[name].reshape(-1)
        j = int(np.argmax(np.abs(g)))
        picks.append((name, j))
    while len(picks) < 50:
        name = names[int(rng.integers(len(names)))]
        g = grads[name].reshape(-1)
        nz = np.flatnonzero(np.abs(g) > 1e-6 * np.max(np.abs(g)))
        picks.append((name, int(rng.choice(nz))))
    assert len(picks) >= 50
    for name, j in picks:
        num = numeric_grad(loss, w[name].data, h=1e-6, index=[j])[0]
        ana = grads[name].reshape(-1)[j]
        # pre-BN conv biases have an exactly zero gradient; allow for round-off there
        assert abs(num - ana) <= max(1e-3 * max(abs(num), abs(ana)), 1e-8), (name, j, num, ana)


def test_weights_round_trip(tmp_path, weights):
    p = tmp_path / "w.ewt"
    M.save_weights(weights, p)
    back = M.load_weights(p)
    assert list(back.tensors) == list(weights.tensors)
    assert all(np.array_equal(back[k].data, weights[k].data) for k in weights.tensors)
    assert back.count_parameters() == weights.count_parameters()


def test_weights_corruption_detected(tmp_path, weights):
    p = tmp_path / "w.ewt"
    M.save_weights(weights, p)
    raw = bytearray(p.read_bytes())
    raw[-100] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(M.WeightsError) as err:
        M.load_weights(p)
    assert err.value.code == "checksum"


def test_weights_missing_tensor(tmp_path, weights):
    import json

    p = tmp_path / "w.ewt"
    M.save_weights(weights, p)
    raw = p.read_bytes()
    nl = raw.index(b"\n", 5)
    man = json.loads(raw[5:nl])
    man["tensors"] = [r for r in man["tensors"] if r["name"] != "fc2.bias"]
    p.write_bytes(raw[:5] + json.dumps(man).encode() + raw[nl:])
    with pytest.raises(M.WeightsError) as err:
        M.load_weights(p)
    assert err.value.code == "missing_tensor" and "fc2.bias" in str(err.value)


def test_weights_version_and_truncation(tmp_path, weights):
    p = tmp_path / "w.ewt"
    M.save_weights(weights, p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-10])
    with pytest.raises(M.WeightsError) as err:
        M.load_weights(p)
    assert err.value.code == "truncated"
    p.write_bytes(raw.replace(b'"version":1', b'"version":2'))
    with pytest.raises(M.WeightsError) as err:
        M.load_weights(p)
    assert err.value.code == "version_mismatch"
