"""Convolutional deep belief network over voxel grids.

The stack is a sequence of convolutional layers (binary units, strided
valid correlation, per-visible-unit biases, per-channel hidden biases),
one fully connected layer, and a top associative layer that joins the
features with duplicated label units.  Propagation in either direction
computes exact Bernoulli conditionals of the layer energy; sampling is
reproducible per generator.

Arrays compute in the dtype of the parameters: float32 for trained
models, float64 wherever an oracle-grade comparison is needed.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from voxbelief.errors import CheckpointError, DataError
from voxbelief.rng import as_generator

CDB_MAGIC = b"CDB1"
CDB_VERSION = 1

KIND_CONV, KIND_DENSE, KIND_TOP = 0, 1, 2


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function, dtype-preserving."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class LayerState:
    """Unit activations, tagged as binary samples or real-valued means."""

    values: np.ndarray
    kind: str = "sample"  # "sample" | "mean"

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.kind not in ("sample", "mean"):
            raise DataError("LayerState kind must be 'sample' or 'mean'")


@dataclass
class ConvLayerParams:
    """One convolutional layer: filters, shared hidden biases, per-unit
    visible biases and an integer stride."""

    filters: np.ndarray  # (C_out, C_in, k, k, k)
    hidden_bias: np.ndarray  # (C_out,)
    visible_bias: np.ndarray  # (C_in, D, D, D)
    stride: int = 1

    def __post_init__(self):
        self.filters = np.asarray(self.filters)
        self.hidden_bias = np.asarray(self.hidden_bias)
        self.visible_bias = np.asarray(self.visible_bias)
        if self.filters.ndim != 5 or self.filters.shape[2] != self.filters.shape[3] \
                or self.filters.shape[3] != self.filters.shape[4]:
            raise DataError("filters must have shape (C_out, C_in, k, k, k)")
        if self.visible_bias.ndim != 4 or self.visible_bias.shape[0] != self.filters.shape[1]:
            raise DataError("visible_bias must have shape (C_in, D, D, D)")
        k = self.kernel
        self.stride = int(self.stride)
        if self.stride < 1:
            raise DataError("stride must be positive")
        for d in self.visible_bias.shape[1:]:
            if k > d:
                raise DataError("filter size exceeds visible extent")
            if (d - k) % self.stride != 0:
                raise DataError("stride must divide (extent - kernel) exactly")
        if self.hidden_bias.shape != (self.filters.shape[0],):
            raise DataError("hidden_bias must have one entry per output channel")

    @property
    def kernel(self) -> int:
        return self.filters.shape[2]

    @property
    def visible_shape(self) -> tuple:
        return self.visible_bias.shape

    @property
    def hidden_shape(self) -> tuple:
        k, s = self.kernel, self.stride
        out = tuple((d - k) // s + 1 for d in self.visible_bias.shape[1:])
        return (self.filters.shape[0],) + out


@dataclass
class DenseLayerParams:
    """Fully connected RBM layer."""

    weights: np.ndarray  # (hidden, visible)
    hidden_bias: np.ndarray
    visible_bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        self.hidden_bias = np.asarray(self.hidden_bias)
        self.visible_bias = np.asarray(self.visible_bias)
        h, v = self.weights.shape
        if self.hidden_bias.shape != (h,) or self.visible_bias.shape != (v,):
            raise DataError("dense layer bias shapes are inconsistent")

    @property
    def visible_shape(self) -> tuple:
        return (self.weights.shape[1],)

    @property
    def hidden_shape(self) -> tuple:
        return (self.weights.shape[0],)


@dataclass
class TopLayerParams:
    """Associative top layer joining features with duplicated label units.

    The label block holds K groups of ``dup`` units whose values are tied:
    a group is either all ones (the chosen class) or all zeros.  Weights of
    the duplicated units are learned independently.
    """

    feature_weights: np.ndarray  # (hidden, feature_visible)
    label_weights: np.ndarray  # (hidden, K * dup)
    hidden_bias: np.ndarray
    feature_bias: np.ndarray
    label_bias: np.ndarray
    dup: int = 10

    def __post_init__(self):
        self.feature_weights = np.asarray(self.feature_weights)
        self.label_weights = np.asarray(self.label_weights)
        self.hidden_bias = np.asarray(self.hidden_bias)
        self.feature_bias = np.asarray(self.feature_bias)
        self.label_bias = np.asarray(self.label_bias)
        self.dup = int(self.dup)
        if self.dup < 1:
            raise DataError("label duplication factor must be >= 1")
        h, f = self.feature_weights.shape
        if self.label_weights.shape[0] != h or self.label_weights.shape[1] % self.dup != 0:
            raise DataError("label weight shape inconsistent with dup")
        if self.hidden_bias.shape != (h,) or self.feature_bias.shape != (f,) \
                or self.label_bias.shape != (self.label_weights.shape[1],):
            raise DataError("top layer bias shapes are inconsistent")

    @property
    def num_classes(self) -> int:
        return self.label_weights.shape[1] // self.dup

    @property
    def hidden_units(self) -> int:
        return self.feature_weights.shape[0]

    @property
    def feature_units(self) -> int:
        return self.feature_weights.shape[1]

    def label_block(self, label: int) -> np.ndarray:
        """Tied-value visible block for one class: ones on its dup group."""
        k = self.num_classes
        if not 0 <= label < k:
            raise DataError(f"label {label} out of range for K={k}")
        block = np.zeros(k * self.dup, dtype=self.label_weights.dtype)
        block[label * self.dup:(label + 1) * self.dup] = 1
        return block

    def group_weight_sums(self) -> np.ndarray:
        """(hidden, K) net label input per class, summing each dup group."""
        h = self.label_weights.shape[0]
        return self.label_weights.reshape(h, self.num_classes, self.dup).sum(axis=2)

    def group_bias_sums(self) -> np.ndarray:
        return self.label_bias.reshape(self.num_classes, self.dup).sum(axis=1)


@dataclass
class LabelDistribution:
    """Distribution over the K categories."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64).reshape(-1)
        if (self.probs < 0).any():
            raise DataError("label probabilities must be nonnegative")
        if abs(self.probs.sum() - 1.0) > 1e-6:
            raise DataError("label probabilities must sum to 1")

    @property
    def num_classes(self) -> int:
        return self.probs.size

    def winner(self) -> int:
        """Argmax class; ties break to the lowest index."""
        return int(np.argmax(self.probs))


@dataclass
class NetworkParams:
    """The full stack: conv layers bottom-up, one dense layer, the top layer."""

    conv_layers: list
    dense: DenseLayerParams
    top: TopLayerParams
    input_dims: tuple[int, int, int]
    payload_origin: int = 3

    def __post_init__(self):
        self.input_dims = tuple(int(d) for d in self.input_dims)
        shape = (1,) + self.input_dims
        for i, layer in enumerate(self.conv_layers):
            if layer.visible_shape != shape:
                raise DataError(f"conv layer {i} visible shape {layer.visible_shape} "
                                f"does not compose with {shape}")
            shape = layer.hidden_shape
        flat = int(np.prod(shape))
        if self.dense.visible_shape != (flat,):
            raise DataError("dense layer does not compose with the conv stack")
        if self.top.feature_units != self.dense.hidden_shape[0]:
            raise DataError("top layer does not compose with the dense layer")

    @property
    def K(self) -> int:
        return self.top.num_classes

    @property
    def layers(self) -> list:
        return [*self.conv_layers, self.dense, self.top]

    def feature_shapes(self) -> list[tuple]:
        shapes = [(1,) + self.input_dims]
        for layer in self.conv_layers:
            shapes.append(layer.hidden_shape)
        shapes.append(self.dense.hidden_shape)
        shapes.append((self.top.hidden_units,))
        return shapes


# ---------------------------------------------------------------------------
# Energy and propagation
# ---------------------------------------------------------------------------

def _conv_patches(params: ConvLayerParams, v: np.ndarray) -> np.ndarray:
    """Strided visible patches, shape (J1, J2, J3, C_in, k, k, k)."""
    k, s = params.kernel, params.stride
    win = sliding_window_view(v, (k, k, k), axis=(1, 2, 3))
    return win[:, ::s, ::s, ::s].transpose(1, 2, 3, 0, 4, 5, 6)


def conv_net_input_up(params: ConvLayerParams, v: np.ndarray) -> np.ndarray:
    """(W * v)_j + c^f for every channel and hidden position."""
    patches = _conv_patches(params, v)
    out = np.tensordot(patches, params.filters, axes=([3, 4, 5, 6], [1, 2, 3, 4]))
    out = out.transpose(3, 0, 1, 2)
    return out + params.hidden_bias[:, None, None, None]


def conv_net_input_down(params: ConvLayerParams, h: np.ndarray) -> np.ndarray:
    """Adjoint map: stride-upsampled correlation of h with the filters, plus b."""
    k, s = params.kernel, params.stride
    out = np.zeros(params.visible_shape, dtype=np.result_type(h, params.filters))
    j1, j2, j3 = params.hidden_shape[1:]
    for a in range(k):
        for b in range(k):
            for c in range(k):
                w = params.filters[:, :, a, b, c]  # (C_out, C_in)
                contrib = np.tensordot(w, h, axes=([0], [0]))
                out[:, a:a + s * j1:s, b:b + s * j2:s, c:c + s * j3:s] += contrib
    return out + params.visible_bias


def conv_energy(params: ConvLayerParams, v: LayerState, h: LayerState) -> float:
    """Scalar energy of a convolutional layer configuration.

    E = -sum_f sum_j h_j^f ((W^f * v)_j + c^f) - sum_l b_l v_l with the
    layer's stride applied inside the correlation.
    """
    vv = np.asarray(v.values)
    hh = np.asarray(h.values)
    if vv.shape != params.visible_shape or hh.shape != params.hidden_shape:
        raise DataError("state shapes do not match the layer")
    net = conv_net_input_up(params, vv)
    return float(-(hh * net).sum() - (params.visible_bias * vv).sum())


def _sample(mean: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(mean.shape)
    return (u < mean).astype(mean.dtype)


def propagate_up(params, v: LayerState, mode: str = "mean", rng=None) -> LayerState:
    """Hidden conditional given the visible state of a conv or dense layer."""
    vv = np.asarray(v.values)
    if isinstance(params, ConvLayerParams):
        if vv.shape != params.visible_shape:
            raise DataError("visible shape mismatch")
        mean = sigmoid(conv_net_input_up(params, vv))
    elif isinstance(params, DenseLayerParams):
        if vv.reshape(-1).shape != params.visible_shape:
            raise DataError("visible shape mismatch")
        mean = sigmoid(params.weights @ vv.reshape(-1) + params.hidden_bias)
    else:
        raise DataError("propagate_up expects a conv or dense layer")
    if mode == "mean":
        return LayerState(mean, "mean")
    if mode == "sample":
        return LayerState(_sample(mean, as_generator(rng)), "sample")
    raise DataError("mode must be 'mean' or 'sample'")


def propagate_down(params, h: LayerState, mode: str = "mean", rng=None) -> LayerState:
    """Visible conditional given the hidden state of a conv or dense layer."""
    hh = np.asarray(h.values)
    if isinstance(params, ConvLayerParams):
        if hh.shape != params.hidden_shape:
            raise DataError("hidden shape mismatch")
        mean = sigmoid(conv_net_input_down(params, hh))
    elif isinstance(params, DenseLayerParams):
        if hh.reshape(-1).shape != params.hidden_shape:
            raise DataError("hidden shape mismatch")
        mean = sigmoid(params.weights.T @ hh.reshape(-1) + params.visible_bias)
    else:
        raise DataError("propagate_down expects a conv or dense layer")
    if mode == "mean":
        return LayerState(mean, "mean")
    if mode == "sample":
        return LayerState(_sample(mean, as_generator(rng)), "sample")
    raise DataError("mode must be 'mean' or 'sample'")


def top_hidden_input(params: TopLayerParams, features: np.ndarray,
                     label: int | None) -> np.ndarray:
    net = params.feature_weights @ features + params.hidden_bias
    if label is not None:
        net = net + params.group_weight_sums()[:, label]
    return net


def label_softmax_given_hidden(params: TopLayerParams, hidden: np.ndarray) -> np.ndarray:
    """p(y | h): softmax over per-group net inputs of the tied label units."""
    scores = params.group_weight_sums().T @ hidden + params.group_bias_sums()
    scores = scores.astype(np.float64)
    scores -= scores.max()
    e = np.exp(scores)
    return e / e.sum()


def label_posterior(params: TopLayerParams, features: np.ndarray) -> np.ndarray:
    """p(y | features) with the top hidden units marginalized out.

    Uses the free energy of each (features, class) visible configuration:
    F = -b.v - sum_j softplus(net_j); the posterior is softmax(-F).
    """
    feats = np.asarray(features, dtype=np.float64).reshape(-1)
    gw = params.group_weight_sums().astype(np.float64)  # (H, K)
    base = params.feature_weights.astype(np.float64) @ feats + params.hidden_bias
    net = base[:, None] + gw  # (H, K)
    softplus = np.logaddexp(0.0, net).sum(axis=0)
    scores = params.group_bias_sums().astype(np.float64) \
        + float(params.feature_bias.astype(np.float64) @ feats) + softplus
    scores -= scores.max()
    e = np.exp(scores)
    return e / e.sum()


def top_free_energy(params: TopLayerParams, features: np.ndarray, label: int) -> float:
    """Free energy of one clamped (features, label) visible configuration."""
    feats = np.asarray(features, dtype=np.float64).reshape(-1)
    block = params.label_block(label).astype(np.float64)
    net = params.feature_weights.astype(np.float64) @ feats \
        + params.label_weights.astype(np.float64) @ block + params.hidden_bias
    vis = float(params.feature_bias.astype(np.float64) @ feats
                + params.label_bias.astype(np.float64) @ block)
    return float(-vis - np.logaddexp(0.0, net).sum())


def sample_label(probs: np.ndarray, rng: np.random.Generator) -> int:
    u = rng.random()
    return int(np.searchsorted(np.cumsum(probs), u, side="right").clip(0, probs.size - 1))


def top_joint_step(params: TopLayerParams, features: LayerState,
                   label: int | None = None, clamp_label: bool = False,
                   rng=None) -> tuple[LayerState, LayerState, LabelDistribution, int]:
    """One alternating Gibbs step on the top layer.

    Samples hidden given the visible (features plus the label block), then
    resamples the features and the label.  The K label groups are drawn as
    a single multinomial over per-group net inputs, keeping the duplicated
    units tied.  ``clamp_label`` holds the label fixed; the returned label
    then equals the input label.
    """
    rng = as_generator(rng)
    feats = np.asarray(features.values).reshape(-1)
    if feats.shape != (params.feature_units,):
        raise DataError("feature shape mismatch")
    if clamp_label and label is None:
        raise DataError("clamp_label requires a label")
    hidden_mean = sigmoid(top_hidden_input(params, feats, label))
    hidden = _sample(hidden_mean, rng)
    feat_mean = sigmoid(params.feature_weights.T @ hidden + params.feature_bias)
    new_feats = _sample(feat_mean, rng)
    probs = label_softmax_given_hidden(params, hidden)
    drawn = sample_label(probs, rng)  # drawn either way: RNG use is clamp-independent
    new_label = int(label) if clamp_label else drawn
    return (LayerState(hidden, "sample"),
            LayerState(new_feats, "sample"),
            LabelDistribution(probs),
            new_label)


# ---------------------------------------------------------------------------
# Architectures
# ---------------------------------------------------------------------------

@dataclass
class ArchitectureSpec:
    """Shape recipe for building a NetworkParams."""

    input_dims: tuple[int, int, int]
    payload_origin: int
    conv: list[tuple[int, int, int]]  # (channels, kernel, stride) per layer
    dense_hidden: int
    top_hidden: int
    num_classes: int
    dup: int = 10


def paper_architecture(num_classes: int = 40) -> ArchitectureSpec:
    """Full-scale preset: 30^3 grid, conv 48/6/2, 160/5/2, 512/4/1,
    dense 1200, top 4000, labels duplicated 10x."""
    return ArchitectureSpec(
        input_dims=(30, 30, 30), payload_origin=3,
        conv=[(48, 6, 2), (160, 5, 2), (512, 4, 1)],
        dense_hidden=1200, top_hidden=4000, num_classes=num_classes, dup=10)


def desk_architecture(num_classes: int = 4) -> ArchitectureSpec:
    """Small preset that trains in minutes on a CPU: 16^3 grid (payload
    12^3), conv 8/4/2 and 16/3/1, dense 64, top 128."""
    return ArchitectureSpec(
        input_dims=(16, 16, 16), payload_origin=2,
        conv=[(8, 4, 2), (16, 3, 1)],
        dense_hidden=64, top_hidden=128, num_classes=num_classes, dup=10)


def build_network(arch: ArchitectureSpec, seed: int = 0,
                  dtype=np.float32, weight_scale: float = 0.01) -> NetworkParams:
    """Initialize a network: weights ~ Normal(0, weight_scale), zero biases."""
    rng = as_generator(seed)
    conv_layers = []
    shape = (1,) + tuple(arch.input_dims)
    for channels, kernel, stride in arch.conv:
        filters = rng.normal(0.0, weight_scale,
                             size=(channels, shape[0], kernel, kernel, kernel)).astype(dtype)
        layer = ConvLayerParams(
            filters=filters,
            hidden_bias=np.zeros(channels, dtype=dtype),
            visible_bias=np.zeros(shape, dtype=dtype),
            stride=stride)
        conv_layers.append(layer)
        shape = layer.hidden_shape
    flat = int(np.prod(shape))
    dense = DenseLayerParams(
        weights=rng.normal(0.0, weight_scale, size=(arch.dense_hidden, flat)).astype(dtype),
        hidden_bias=np.zeros(arch.dense_hidden, dtype=dtype),
        visible_bias=np.zeros(flat, dtype=dtype))
    top = TopLayerParams(
        feature_weights=rng.normal(0.0, weight_scale,
                                   size=(arch.top_hidden, arch.dense_hidden)).astype(dtype),
        label_weights=rng.normal(0.0, weight_scale,
                                 size=(arch.top_hidden,
                                       arch.num_classes * arch.dup)).astype(dtype),
        hidden_bias=np.zeros(arch.top_hidden, dtype=dtype),
        feature_bias=np.zeros(arch.dense_hidden, dtype=dtype),
        label_bias=np.zeros(arch.num_classes * arch.dup, dtype=dtype),
        dup=arch.dup)
    return NetworkParams(conv_layers, dense, top, tuple(arch.input_dims),
                         arch.payload_origin)


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------

def _write_array(fh, arr: np.ndarray):
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_array(fh, shape) -> np.ndarray:
    count = int(np.prod(shape))
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise CheckpointError("truncated", "checkpoint ends mid-tensor")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def _read_u32s(fh, n) -> tuple:
    raw = fh.read(4 * n)
    if len(raw) != 4 * n:
        raise CheckpointError("truncated", "checkpoint ends mid-header")
    return struct.unpack("<" + "I" * n, raw)


def save_checkpoint(net: NetworkParams, path) -> None:
    """Write the CDB1 binary checkpoint format."""
    buf = io.BytesIO()
    buf.write(CDB_MAGIC)
    buf.write(struct.pack("<II", CDB_VERSION, len(net.layers)))
    for layer in net.conv_layers:
        buf.write(struct.pack("<B", KIND_CONV))
        co, ci, k = layer.filters.shape[0], layer.filters.shape[1], layer.kernel
        d1, d2, d3 = layer.visible_bias.shape[1:]
        buf.write(struct.pack("<7I", co, ci, k, layer.stride, d1, d2, d3))
        _write_array(buf, layer.filters)
        _write_array(buf, layer.hidden_bias)
        _write_array(buf, layer.visible_bias)
    buf.write(struct.pack("<B", KIND_DENSE))
    buf.write(struct.pack("<2I", *net.dense.weights.shape))
    _write_array(buf, net.dense.weights)
    _write_array(buf, net.dense.hidden_bias)
    _write_array(buf, net.dense.visible_bias)
    buf.write(struct.pack("<B", KIND_TOP))
    top = net.top
    buf.write(struct.pack("<4I", top.hidden_units, top.feature_units,
                          top.num_classes, top.dup))
    _write_array(buf, top.feature_weights)
    _write_array(buf, top.label_weights)
    _write_array(buf, top.hidden_bias)
    _write_array(buf, top.feature_bias)
    _write_array(buf, top.label_bias)
    buf.write(struct.pack("<II", net.K, top.dup))
    buf.write(struct.pack("<IIII", *net.input_dims, net.payload_origin))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> NetworkParams:
    """Read a CDB1 checkpoint; magic/version/shape problems raise
    CheckpointError with a distinct reason tag."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CDB_MAGIC:
            raise CheckpointError("magic", f"bad checkpoint magic {magic!r}")
        version, n_layers = _read_u32s(fh, 2)
        if version != CDB_VERSION:
            raise CheckpointError(
                "version", f"checkpoint version {version} unsupported "
                f"(expected {CDB_VERSION})")
        conv_layers = []
        dense = top = None
        for _ in range(n_layers):
            kind_raw = fh.read(1)
            if len(kind_raw) != 1:
                raise CheckpointError("truncated", "checkpoint ends mid-layer")
            kind = kind_raw[0]
            if kind == KIND_CONV:
                co, ci, k, stride, d1, d2, d3 = _read_u32s(fh, 7)
                filters = _read_array(fh, (co, ci, k, k, k))
                hb = _read_array(fh, (co,))
                vb = _read_array(fh, (ci, d1, d2, d3))
                try:
                    conv_layers.append(ConvLayerParams(filters, hb, vb, stride))
                except DataError as exc:
                    raise CheckpointError("shape", str(exc)) from exc
            elif kind == KIND_DENSE:
                h, v = _read_u32s(fh, 2)
                dense = DenseLayerParams(_read_array(fh, (h, v)),
                                         _read_array(fh, (h,)),
                                         _read_array(fh, (v,)))
            elif kind == KIND_TOP:
                h, f, k_cls, dup = _read_u32s(fh, 4)
                top = TopLayerParams(_read_array(fh, (h, f)),
                                     _read_array(fh, (h, k_cls * dup)),
                                     _read_array(fh, (h,)),
                                     _read_array(fh, (f,)),
                                     _read_array(fh, (k_cls * dup,)),
                                     dup=dup)
            else:
                raise CheckpointError("shape", f"unknown layer kind tag {kind}")
        k_cls, dup = _read_u32s(fh, 2)
        dims = _read_u32s(fh, 4)
        if dense is None or top is None:
            raise CheckpointError("shape", "checkpoint lacks dense or top layer")
        if top.num_classes != k_cls or top.dup != dup:
            raise CheckpointError("shape", "trailing K/dup disagree with top layer")
        try:
            return NetworkParams(conv_layers, dense, top, dims[:3], dims[3])
        except DataError as exc:
            raise CheckpointError("shape", str(exc)) from exc
