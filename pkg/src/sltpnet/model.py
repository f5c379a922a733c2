"""3-D squeeze-and-excitation residual classifier for 36^3 lung ROIs.

Architecture (default config)::

    input 1 x 36^3
    4 x [residual block -> SE block -> 2x2x2 max pool]   36 -> 18 -> 9 -> 4 -> 2
    flatten (512 * 2^3 = 4096)
    dense 512 -> ReLU -> dropout
    dense 128 -> ReLU -> dropout
    dense 10 -> softmax

All convolutions are 1x1x1 with bias; SE dense layers have no bias.
"""
from __future__ import annotations

import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .nn import functional as F
from .nn import table as T
from .nn.tensor import Tensor

FORMAT_VERSION = 1
WEIGHTS_MAGIC = b"EWT1\n"
BN_EPS = 1e-3
BN_MOMENTUM = 0.99
INIT_SCHEME = "he_uniform(fan_in) weights; zero biases and beta; unit gamma; running mean 0, var 1"

PAPER_TOTAL_PARAMS = 2_914_890
PAPER_NON_TRAINABLE = 5_760


class ConfigError(ValueError):
    pass


class WeightsError(ValueError):
    """Weights file could not be loaded; ``code`` names the failure."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass(frozen=True)
class SECNNConfig:
    input_edge: int = 36
    input_channels: int = 1
    block_channels: tuple = (64, 128, 256, 512)
    se_reduction: int = 16
    fc_widths: tuple = (512, 128)
    num_classes: int = 10
    dropout_p: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        object.__setattr__(self, "fc_widths", tuple(int(c) for c in self.fc_widths))

    def validate(self) -> None:
        ch = self.block_channels
        if not ch:
            raise ConfigError("at least one residual block is required")
        if any(b != 2 * a for a, b in zip(ch, ch[1:])):
            raise ConfigError(f"block channels must double from block to block, got {ch}")
        if self.se_reduction < 1 or any(c % self.se_reduction for c in ch):
            raise ConfigError(f"SE reduction {self.se_reduction} must divide every block width {ch}")
        if self.input_channels < 1 or self.num_classes < 2:
            raise ConfigError("need >= 1 input channel and >= 2 classes")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout probability {self.dropout_p} outside [0, 1)")
        if self.feature_edge() < 1:
            raise ConfigError(f"input edge {self.input_edge} vanishes after {len(ch)} poolings")

    def spatial_chain(self) -> list[int]:
        edges = [self.input_edge]
        for _ in self.block_channels:
            edges.append(edges[-1] // 2)
        return edges

    def feature_edge(self) -> int:
        return self.spatial_chain()[-1]

    def flat_features(self) -> int:
        return self.block_channels[-1] * self.feature_edge() ** 3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_channels"] = list(self.block_channels)
        d["fc_widths"] = list(self.fc_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SECNNConfig":
        return cls(**d)


@dataclass
class ModelWeights:
    config: SECNNConfig
    tensors: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)
    bn_eps: float = BN_EPS
    bn_momentum: float = BN_MOMENTUM
    version: int = FORMAT_VERSION

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def trainable(self) -> list[Tensor]:
        return [t for t in self.tensors.values() if t.trainable]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            self.config,
            OrderedDict((k, t.copy()) for k, t in self.tensors.items()),
            self.bn_eps,
            self.bn_momentum,
            self.version,
        )

    def astype(self, dtype) -> "ModelWeights":
        return ModelWeights(
            self.config,
            OrderedDict((k, t.astype(dtype)) for k, t in self.tensors.items()),
            self.bn_eps,
            self.bn_momentum,
            self.version,
        )

    def bn_state(self, prefix: str) -> F.BatchNormState:
        # views onto the stored arrays, so running-stat updates land in the weights
        return F.BatchNormState(
            self.tensors[f"{prefix}.gamma"].data,
            self.tensors[f"{prefix}.beta"].data,
            self.tensors[f"{prefix}.running_mean"].data,
            self.tensors[f"{prefix}.running_var"].data,
            self.bn_eps,
            self.bn_momentum,
        )

    def count_parameters(self) -> tuple[int, int]:
        trainable = sum(t.size for t in self.tensors.values() if t.trainable)
        frozen = sum(t.size for t in self.tensors.values() if not t.trainable)
        return trainable, frozen


# -- parameter layout ----------------------------------------------------------


def parameter_layout(config: SECNNConfig) -> list[tuple[str, tuple, bool, str]]:
    """Ordered ``(name, shape, trainable, init)`` records for ``config``."""
    layout = []

    def conv(name, cin, cout):
        layout.append((f"{name}.weight", (cout, cin), True, "fan_in"))
        layout.append((f"{name}.bias", (cout,), True, "zeros"))

    def bn(name, c):
        layout.append((f"{name}.gamma", (c,), True, "ones"))
        layout.append((f"{name}.beta", (c,), True, "zeros"))
        layout.append((f"{name}.running_mean", (c,), False, "zeros"))
        layout.append((f"{name}.running_var", (c,), False, "ones"))

    cin = config.input_channels
    for i, c in enumerate(config.block_channels, start=1):
        p = f"block{i}"
        conv(f"{p}.res.conv1", cin, c)
        bn(f"{p}.res.bn1", c)
        conv(f"{p}.res.conv2", c, c)
        bn(f"{p}.res.bn2", c)
        conv(f"{p}.res.shortcut", cin, c)
        bn(f"{p}.res.bn_shortcut", c)
        mid = c // config.se_reduction
        layout.append((f"{p}.se.down.weight", (mid, c), True, "fan_in"))
        layout.append((f"{p}.se.up.weight", (c, mid), True, "fan_in"))
        cin = c
    fin = config.flat_features()
    for j, width in enumerate(config.fc_widths, start=1):
        layout.append((f"fc{j}.weight", (width, fin), True, "fan_in"))
        layout.append((f"fc{j}.bias", (width,), True, "zeros"))
        fin = width
    layout.append(("classifier.weight", (config.num_classes, fin), True, "fan_in"))
    layout.append(("classifier.bias", (config.num_classes,), True, "zeros"))
    return layout


def build_model(config: Optional[SECNNConfig] = None, seed: int = 0) -> ModelWeights:
    """Allocate and initialise every tensor of the classifier."""
    config = config or SECNNConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    for name, shape, trainable, init in parameter_layout(config):
        if init == "fan_in":
            limit = np.sqrt(6.0 / shape[-1])
            data = rng.uniform(-limit, limit, size=shape).astype(np.float32)
        elif init == "ones":
            data = np.ones(shape, np.float32)
        else:
            data = np.zeros(shape, np.float32)
        tensors[name] = Tensor(data, trainable=trainable, name=name)
    return ModelWeights(config, tensors)


def count_parameters(weights: ModelWeights) -> tuple[int, int]:
    """``(trainable, non_trainable)`` element counts."""
    return weights.count_parameters()


def parameter_breakdown(weights: ModelWeights) -> "OrderedDict[str, int]":
    """Trainable parameter count per top-level group (block1..4, fc1, fc2, classifier)."""
    out: "OrderedDict[str, int]" = OrderedDict()
    for name, t in weights.tensors.items():
        if t.trainable:
            group = name.split(".")[0]
            out[group] = out.get(group, 0) + t.size
    return out


# -- blocks --------------------------------------------------------------------


def _accumulate(weights: ModelWeights, name: str, g) -> None:
    if g is not None:
        weights.tensors[name].accumulate(g)


def _conv_bn(x, weights, conv, bn, mode, apply_relu=False):
    c, pb_conv = F.conv3d_pointwise(x, weights[f"{conv}.weight"].data, weights[f"{conv}.bias"].data)
    norm = F.batchnorm_relu3d if apply_relu else F.batchnorm3d
    y, pb_bn = norm(c, weights.bn_state(bn), mode)
    del c

    def pullback(dy, need_dx=True):
        dc, dgamma, dbeta = pb_bn(dy)
        _accumulate(weights, f"{bn}.gamma", dgamma)
        _accumulate(weights, f"{bn}.beta", dbeta)
        dx, dW, db = pb_conv(dc, need_dx)
        _accumulate(weights, f"{conv}.weight", dW)
        _accumulate(weights, f"{conv}.bias", db)
        return dx

    return y, pullback


def residual_block(x: np.ndarray, weights: ModelWeights, prefix: str, mode: str = "infer"):
    """Two-branch residual unit.

    Left: conv -> BN -> ReLU -> conv -> BN. Right: conv -> BN. The branch
    sum goes through a final ReLU. Returns ``(y, pullback)``; the pullback
    accumulates parameter gradients into ``weights`` and returns ``dx``.
    """
    cin = weights[f"{prefix}.conv1.weight"].shape[1]
    if x.ndim != 5 or x.shape[1] != cin:
        raise F.ShapeError(f"{prefix}: expected {cin} input channels, got shape {x.shape}")
    h, pb1 = _conv_bn(x, weights, f"{prefix}.conv1", f"{prefix}.bn1", mode, apply_relu=True)
    left, pb2 = _conv_bn(h, weights, f"{prefix}.conv2", f"{prefix}.bn2", mode)
    del h
    right, pb3 = _conv_bn(x, weights, f"{prefix}.shortcut", f"{prefix}.bn_shortcut", mode)
    y, pb_out = F.add_relu(left, right, inplace=True)
    del left, right
    pbs = [pb1, pb2, pb3, pb_out]

    def pullback(dy, need_dx=True):
        pb1, pb2, pb3, pb_out = pbs
        pbs.clear()
        ds = pb_out(dy)
        del pb_out
        dx = pb3(ds, need_dx)
        del pb3
        dh = pb2(ds)
        del pb2, ds
        dx_left = pb1(dh, need_dx)
        if need_dx:
            dx += dx_left
        return dx

    return y, pullback


def se_block(x: np.ndarray, weights: ModelWeights, prefix: str):
    """Squeeze-and-excitation channel reweighting.

    ``s = sigmoid(W_up relu(W_down gap(x)))`` and ``y = s * x`` per channel.
    """
    w_down = weights[f"{prefix}.down.weight"].data
    w_up = weights[f"{prefix}.up.weight"].data
    c = x.shape[1]
    if w_down.shape[1] != c:
        raise F.ShapeError(f"{prefix}: SE block built for {w_down.shape[1]} channels, got {c}")
    if c % w_down.shape[0]:
        raise F.ShapeError(f"{prefix}: reduction does not divide {c} channels")
    z, pb_gap = F.global_avg_pool3d(x)
    h, pb_down = F.dense(z, w_down)
    h, pb_relu = F.relu(h)
    a, pb_up = F.dense(h, w_up)
    s, pb_sig = F.sigmoid(a)
    y, pb_scale = F.channel_scale(x, s)

    def pullback(dy, need_dx=True):
        dx, ds = pb_scale(dy)
        da = pb_sig(ds)
        dh, dW_up, _ = pb_up(da)
        _accumulate(weights, f"{prefix}.up.weight", dW_up)
        dz, dW_down, _ = pb_down(pb_relu(dh))
        _accumulate(weights, f"{prefix}.down.weight", dW_down)
        return pb_gap(dz, out=dx)

    return y, pullback


def stem_block(x: np.ndarray, weights: ModelWeights, prefix: str = "block1", mode: str = "infer", table=None):
    """Residual block, SE block and max pool for a single-channel input.

    Equivalent to ``maxpool(se_block(residual_block(x)))`` but the residual
    block is evaluated once per distinct voxel value (see ``nn.table``) and
    the SE squeeze and the pooling gather straight from that table, so the
    full-resolution activation is never materialised. Positive SE scales
    commute with the max, so pooling happens before rescaling.
    """
    res, se = f"{prefix}.res", f"{prefix}.se"
    cin = weights[f"{res}.conv1.weight"].shape[1]
    if x.ndim != 5 or x.shape[1] != cin or cin != 1:
        raise F.ShapeError(f"{prefix}: value-table path needs one input channel, got shape {x.shape}")
    dtype = x.dtype
    t0, inv, counts = table if table is not None else T.value_table(x)

    def conv_bn(t, conv, bn, apply_relu=False):
        return T.conv_bn(
            t,
            weights[f"{conv}.weight"].data,
            weights[f"{conv}.bias"].data,
            weights.bn_state(bn),
            counts,
            mode,
            apply_relu,
        )

    h, pb1 = conv_bn(t0, f"{res}.conv1", f"{res}.bn1", apply_relu=True)
    left, pb2 = conv_bn(h, f"{res}.conv2", f"{res}.bn2")
    right, pb3 = conv_bn(t0, f"{res}.shortcut", f"{res}.bn_shortcut")
    r = left + right
    np.maximum(r, 0, out=r)

    z = T.gather_means(r, inv)
    hid, pb_down = F.dense(z, weights[f"{se}.down.weight"].data)
    hid, pb_relu = F.relu(hid)
    a, pb_up = F.dense(hid, weights[f"{se}.up.weight"].data)
    s, pb_sig = F.sigmoid(a)
    m, rows = T.gather_maxpool(r, inv)
    y = m * s[:, :, None, None, None]

    def pullback(dy, need_dx=False):
        if need_dx:
            raise NotImplementedError("the value-table stem does not propagate to its input")
        ds = np.einsum("ncv,ncv->nc", dy.reshape(dy.shape[0], dy.shape[1], -1), m.reshape(m.shape[0], m.shape[1], -1))
        dm = dy * s[:, :, None, None, None]
        dh, dW_up, _ = pb_up(pb_sig(ds.astype(dtype)))
        _accumulate(weights, f"{se}.up.weight", dW_up)
        dz, dW_down, _ = pb_down(pb_relu(dh))
        _accumulate(weights, f"{se}.down.weight", dW_down)
        g = T.scatter_grad(dm, rows, dz, inv, r.shape[0], dtype)
        g = np.where(r > 0, g, 0).astype(dtype)

        def backward(pb, conv, bn, grad):
            dt, dW, db, dgamma, dbeta = pb(grad)
            _accumulate(weights, f"{res}.{conv}.weight", dW)
            _accumulate(weights, f"{res}.{conv}.bias", db)
            _accumulate(weights, f"{res}.{bn}.gamma", dgamma)
            _accumulate(weights, f"{res}.{bn}.beta", dbeta)
            return dt

        backward(pb3, "shortcut", "bn_shortcut", g)
        dh = backward(pb2, "conv2", "bn2", g)
        backward(pb1, "conv1", "bn1", dh)
        return None

    return y, pullback


# -- full network --------------------------------------------------------------


def _check_batch(weights: ModelWeights, batch: np.ndarray) -> None:
    cfg = weights.config
    e = cfg.input_edge
    expect = (cfg.input_channels, e, e, e)
    if batch.ndim != 5 or tuple(batch.shape[1:]) != expect:
        raise F.ShapeError(f"batch must be N x {cfg.input_channels} x {e}^3, got {batch.shape}")


def _logits(weights, batch, mode, rng=None, trace=None):
    _check_batch(weights, batch)
    cfg = weights.config
    dtype = weights[f"block1.res.conv1.weight"].data.dtype
    x = np.ascontiguousarray(batch, dtype=dtype)
    if trace is not None:
        trace.append(("input", x.shape))
    pullbacks = []
    table = None
    if cfg.input_channels == 1:
        # quantised inputs (rescaled integer HU) repeat values heavily
        table = T.value_table(x)
        if len(table[0]) > x.size // 4:
            table = None
    for i in range(1, len(cfg.block_channels) + 1):
        if i == 1 and table is not None:
            x, pb_stem = stem_block(x, weights, "block1", mode, table)
            pullbacks.append((pb_stem,))
        else:
            x, pb_res = residual_block(x, weights, f"block{i}.res", mode)
            x, pb_se = se_block(x, weights, f"block{i}.se")
            x, pb_pool = F.maxpool3d_2x2x2(x)
            pullbacks.append((pb_res, pb_se, pb_pool))
        if trace is not None:
            trace.append((f"block{i}", x.shape))
    pooled_shape = x.shape
    h = x.reshape(x.shape[0], -1)
    if trace is not None:
        trace.append(("flatten", h.shape))
    head = []
    for j in range(1, len(cfg.fc_widths) + 1):
        h, pb_fc = F.dense(h, weights[f"fc{j}.weight"].data, weights[f"fc{j}.bias"].data)
        h, pb_relu = F.relu(h)
        h, pb_drop = F.dropout(h, cfg.dropout_p, mode, rng)
        head.append((j, pb_fc, pb_relu, pb_drop))
        if trace is not None:
            trace.append((f"fc{j}", h.shape))
    logits, pb_cls = F.dense(h, weights["classifier.weight"].data, weights["classifier.bias"].data)
    if trace is not None:
        trace.append(("logits", logits.shape))

    def pullback(dlogits):
        dh, dW, db = pb_cls(dlogits)
        _accumulate(weights, "classifier.weight", dW)
        _accumulate(weights, "classifier.bias", db)
        for j, pb_fc, pb_relu, pb_drop in reversed(head):
            dh, dW, db = pb_fc(pb_relu(pb_drop(dh)))
            _accumulate(weights, f"fc{j}.weight", dW)
            _accumulate(weights, f"fc{j}.bias", db)
        head.clear()
        dx = dh.reshape(pooled_shape)
        while pullbacks:
            stage = pullbacks.pop()
            if len(stage) == 1:
                dx = stage[0](dx, need_dx=False)
                continue
            pb_res, pb_se, pb_pool = stage
            dx = pb_se(pb_pool(dx))
            dx = pb_res(dx, need_dx=bool(pullbacks))
        return dx

    return logits, pullback


def forward(
    weights: ModelWeights,
    batch: np.ndarray,
    mode: str = "infer",
    rng: Optional[np.random.Generator] = None,
    trace: Optional[list] = None,
) -> np.ndarray:
    """Class probabilities, shape N x num_classes.

    ``trace``, when given, receives ``(stage, shape)`` records for every stage.
    """
    logits, _ = _logits(weights, batch, mode, rng, trace)
    return F.softmax(logits)


def loss_and_gradients(
    weights: ModelWeights,
    batch: np.ndarray,
    labels: np.ndarray,
    rng: Optional[np.random.Generator] = None,
    mode: str = "train",
) -> tuple[float, np.ndarray]:
    """Cross-entropy of 0-based ``labels``; gradients accumulate into ``weights``.

    Returns ``(loss, logits)``.
    """
    logits, pullback = _logits(weights, batch, mode, rng)
    loss, dlogits = F.softmax_cross_entropy(logits, labels)
    pullback(dlogits.astype(logits.dtype, copy=False))
    return loss, logits


def predict(weights: ModelWeights, batch: np.ndarray, batch_size: Optional[int] = None) -> np.ndarray:
    """1-based class labels; ties go to the lowest class index."""
    probs = predict_proba(weights, batch, batch_size)
    return np.argmax(probs, axis=1) + 1


def predict_proba(weights: ModelWeights, batch: np.ndarray, batch_size: Optional[int] = None) -> np.ndarray:
    if batch_size is None or batch_size >= len(batch):
        return forward(weights, batch, "infer")
    parts = [forward(weights, batch[i : i + batch_size], "infer") for i in range(0, len(batch), batch_size)]
    return np.concatenate(parts, axis=0)


# -- serialisation -------------------------------------------------------------


def _manifest(weights: ModelWeights) -> dict:
    records = []
    offset = 0
    for name, t in weights.tensors.items():
        records.append({"name": name, "shape": list(t.shape), "offset": offset, "trainable": t.trainable})
        offset += t.size * 4
    trainable, frozen = weights.count_parameters()
    return {
        "version": weights.version,
        "config": weights.config.to_dict(),
        "batchnorm": {"eps": weights.bn_eps, "momentum": weights.bn_momentum},
        "init": INIT_SCHEME,
        "counts": {"trainable": trainable, "non_trainable": frozen},
        "payload_bytes": offset,
        "tensors": records,
    }


def save_weights(weights: ModelWeights, path) -> None:
    """Write ``EWT1\\n``, a one-line JSON manifest, the float32 LE payload and a CRC-32."""
    manifest = json.dumps(_manifest(weights), sort_keys=True, separators=(",", ":"))
    payload = b"".join(np.ascontiguousarray(t.data, dtype="<f4").tobytes() for t in weights.tensors.values())
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(manifest.encode("utf-8") + b"\n")
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def load_weights(path) -> ModelWeights:
    raw = Path(path).read_bytes()
    if not raw.startswith(WEIGHTS_MAGIC):
        raise WeightsError("bad_magic", f"{path} is not an EWT1 weights file")
    nl = raw.find(b"\n", len(WEIGHTS_MAGIC))
    if nl < 0:
        raise WeightsError("bad_manifest", "manifest line is not terminated")
    try:
        manifest = json.loads(raw[len(WEIGHTS_MAGIC) : nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightsError("bad_manifest", str(exc)) from None
    if manifest.get("version") != FORMAT_VERSION:
        raise WeightsError("version_mismatch", f"file version {manifest.get('version')} != {FORMAT_VERSION}")
    body = raw[nl + 1 :]
    nbytes = manifest["payload_bytes"]
    if len(body) != nbytes + 4:
        raise WeightsError("truncated", f"expected {nbytes} payload bytes plus checksum, found {len(body)}")
    payload, (crc,) = body[:nbytes], struct.unpack("<I", body[nbytes:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise WeightsError("checksum", "payload CRC-32 does not match")

    config = SECNNConfig.from_dict(manifest["config"])
    config.validate()
    records = {r["name"]: r for r in manifest["tensors"]}
    tensors = OrderedDict()
    for name, shape, trainable, _ in parameter_layout(config):
        rec = records.pop(name, None)
        if rec is None:
            raise WeightsError("missing_tensor", f"tensor {name!r} is absent from the manifest")
        if tuple(rec["shape"]) != shape:
            raise WeightsError("shape_mismatch", f"tensor {name!r} has shape {tuple(rec['shape'])}, expected {shape}")
        count = int(np.prod(shape))
        data = np.frombuffer(payload, dtype="<f4", count=count, offset=rec["offset"]).astype(np.float32)
        tensors[name] = Tensor(data.reshape(shape), trainable=trainable, name=name)
    if records:
        raise WeightsError("unexpected_tensor", f"unknown tensors in manifest: {sorted(records)}")
    bn = manifest["batchnorm"]
    weights = ModelWeights(config, tensors, float(bn["eps"]), float(bn["momentum"]))
    counts = weights.count_parameters()
    stated = (manifest["counts"]["trainable"], manifest["counts"]["non_trainable"])
    if counts != stated:
        raise WeightsError("count_mismatch", f"manifest states {stated} parameters, layout gives {counts}")
    if config == SECNNConfig() and sum(counts) != PAPER_TOTAL_PARAMS:
        raise WeightsError("count_mismatch", f"default architecture must hold {PAPER_TOTAL_PARAMS} parameters")
    return weights
