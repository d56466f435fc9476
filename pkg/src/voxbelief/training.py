"""Learning rules for the network.

Layer-wise pretraining uses contrastive divergence, with two first-layer
refinements: hidden positions whose data receptive field is completely
empty contribute nothing to the learning statistics, and a sparsity
penalty pulls the mean hidden activation toward a small target.  The top
associative layer trains with fast persistent contrastive divergence.
Generative fine-tuning alternates a bottom-up wake pass with a top-down
sleep pass driven by a persistent top-layer chain, keeping one tied
weight set per layer.  Discriminative fine-tuning treats the stack as a
feed-forward logistic network with a softmax readout.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from voxbelief.errors import DataError, NumericError
from voxbelief.network import (
    ConvLayerParams,
    DenseLayerParams,
    NetworkParams,
    TopLayerParams,
    sigmoid,
)
from voxbelief.rng import as_generator


@dataclass
class TrainConfig:
    """Hyperparameters for every training stage; all exposed in config files."""

    learning_rate: float = 0.01
    top_learning_rate: float = 0.001
    momentum: float = 0.9
    momentum_start_epoch: int = 5
    weight_decay: float = 1e-4
    cd_k: int = 1
    batch_size: int = 32
    epochs_per_layer: int = 10
    sparsity_target: float = 0.02
    sparsity_weight: float = 0.1
    fpcd_fast_lr: float = 0.001
    fpcd_fast_decay: float = 0.95
    persistent_chains: int = 32
    wake_sleep_epochs: int = 2
    wake_sleep_learning_rate: float = 0.001
    finetune_epochs: int = 10
    finetune_learning_rate: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise DataError("learning_rate must be positive")
        if self.cd_k < 1:
            raise DataError("cd_k must be >= 1")
        if not 0.0 < self.sparsity_target < 1.0:
            raise DataError("sparsity_target must lie in (0, 1)")


def load_train_config(path) -> TrainConfig:
    """Parse a flat ``key = value`` file with TrainConfig field names."""
    values = {}
    types = {f.name: f.type for f in fields(TrainConfig)}
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"line {lineno}: expected 'key = value'")
            key, val = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise DataError(f"line {lineno}: unknown config key {key!r}")
            caster = int if types[key] in ("int", int) else float
            try:
                values[key] = caster(val)
            except ValueError as exc:
                raise DataError(f"line {lineno}: bad value for {key}") from exc
    return TrainConfig(**values)


def save_train_config(cfg: TrainConfig, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for f in fields(TrainConfig):
            fh.write(f"{f.name} = {getattr(cfg, f.name)}\n")


@dataclass
class StepDiagnostics:
    recon_xent: float
    mean_hidden_act: float
    grad_norm: float


# ---------------------------------------------------------------------------
# Batched layer primitives (training-internal)
# ---------------------------------------------------------------------------

def _conv_patches_batch(layer: ConvLayerParams, v: np.ndarray) -> np.ndarray:
    """(B, J1, J2, J3, C_in, k, k, k) strided patches of a batch."""
    k, s = layer.kernel, layer.stride
    win = sliding_window_view(v, (k, k, k), axis=(2, 3, 4))
    return win[:, :, ::s, ::s, ::s].transpose(0, 2, 3, 4, 1, 5, 6, 7)


def _conv_up_net_batch(layer: ConvLayerParams, v: np.ndarray) -> np.ndarray:
    patches = _conv_patches_batch(layer, v)
    out = np.tensordot(patches, layer.filters, axes=([4, 5, 6, 7], [1, 2, 3, 4]))
    return out.transpose(0, 4, 1, 2, 3) + layer.hidden_bias[None, :, None, None, None]


def _conv_down_linear_batch(layer: ConvLayerParams, h: np.ndarray) -> np.ndarray:
    """Transpose of the strided correlation, without the visible bias."""
    k, s = layer.kernel, layer.stride
    bsz = h.shape[0]
    out = np.zeros((bsz,) + layer.visible_shape, dtype=np.result_type(h, layer.filters))
    j1, j2, j3 = layer.hidden_shape[1:]
    for a in range(k):
        for b in range(k):
            for c in range(k):
                w = layer.filters[:, :, a, b, c]
                contrib = np.einsum("bfjkl,fc->bcjkl", h, w, optimize=True)
                out[:, :, a:a + s * j1:s, b:b + s * j2:s, c:c + s * j3:s] += contrib
    return out


def _conv_grad_filters_batch(layer: ConvLayerParams, v: np.ndarray,
                             h: np.ndarray) -> np.ndarray:
    """Sum over positions, mean over batch of patch x hidden correlations."""
    patches = _conv_patches_batch(layer, v)
    grad = np.tensordot(h.transpose(0, 2, 3, 4, 1), patches,
                        axes=([0, 1, 2, 3], [0, 1, 2, 3]))
    return grad / v.shape[0]


def _bernoulli(mean: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return (rng.random(mean.shape) < mean).astype(mean.dtype)


def _xent(target: np.ndarray, mean: np.ndarray) -> float:
    m = np.clip(mean.astype(np.float64), 1e-7, 1.0 - 1e-7)
    t = target.astype(np.float64)
    return float(-(t * np.log(m) + (1 - t) * np.log(1 - m)).mean())


def _check_finite(*arrays):
    for arr in arrays:
        if not np.isfinite(arr).all():
            raise NumericError("non-finite gradient; batch aborted")


# ---------------------------------------------------------------------------
# Contrastive divergence
# ---------------------------------------------------------------------------

def _new_velocity(shapes: dict, dtype) -> dict:
    return {name: np.zeros(shape, dtype=dtype) for name, shape in shapes.items()}


def _apply_update(params_arrays: dict, grads: dict, velocity: dict,
                  lr: float, momentum: float) -> dict:
    out = {}
    for name, arr in params_arrays.items():
        velocity[name] = momentum * velocity[name] + grads[name]
        out[name] = (arr + lr * velocity[name]).astype(arr.dtype)
    return out


@dataclass
class CDStepResult:
    params: object
    velocity: dict
    diagnostics: StepDiagnostics


def _cd_step_conv(layer: ConvLayerParams, batch: np.ndarray, cfg: TrainConfig,
                  rng, velocity, lr, momentum, mask=None,
                  sparsity: bool = False) -> CDStepResult:
    v0 = np.asarray(batch, dtype=layer.filters.dtype)
    if v0.ndim != 5 or v0.shape[1:] != layer.visible_shape:
        raise DataError("batch shape does not match the conv layer")
    if mask is not None and not mask.any():
        # no active receptive field anywhere: a strict no-op, velocity untouched
        if velocity is None:
            velocity = _new_velocity(
                {"filters": layer.filters.shape, "hidden_bias": layer.hidden_bias.shape,
                 "visible_bias": layer.visible_bias.shape}, layer.filters.dtype)
        return CDStepResult(layer, velocity, StepDiagnostics(0.0, 0.0, 0.0))
    bsz = v0.shape[0]
    h_mean0 = sigmoid(_conv_up_net_batch(layer, v0))
    h_stat0 = h_mean0 if mask is None else h_mean0 * mask
    h = _bernoulli(h_mean0, rng)
    if mask is not None:
        h = h * mask
    v_mean = v = h_mean = None
    for _ in range(cfg.cd_k):
        v_mean = sigmoid(_conv_down_linear_batch(layer, h) + layer.visible_bias)
        v = _bernoulli(v_mean, rng)
        h_mean = sigmoid(_conv_up_net_batch(layer, v))
        h = _bernoulli(h_mean, rng)
        if mask is not None:
            h = h * mask
    h_stat1 = h_mean if mask is None else h_mean * mask

    grad_w = _conv_grad_filters_batch(layer, v0, h_stat0) \
        - _conv_grad_filters_batch(layer, v, h_stat1)
    grad_hb = (h_stat0 - h_stat1).sum(axis=(2, 3, 4)).mean(axis=0)
    if mask is None:
        grad_vb = (v0 - v).mean(axis=0)
    else:
        cov = _coverage_mask(layer, mask)
        grad_vb = ((v0 - v) * cov).mean(axis=0)
    grad_w = grad_w - cfg.weight_decay * layer.filters

    if sparsity:
        active = mask.sum(axis=(0, 2, 3, 4)) if mask is not None \
            else np.full(layer.filters.shape[0], float(bsz * np.prod(layer.hidden_shape[1:])))
        q = np.where(active > 0,
                     h_stat0.sum(axis=(0, 2, 3, 4)) / np.maximum(active, 1.0),
                     cfg.sparsity_target)
        push = cfg.sparsity_weight * (cfg.sparsity_target - q)
        grad_hb = grad_hb + push.astype(grad_hb.dtype)
        patches = _conv_patches_batch(layer, v0)
        if mask is not None:
            # the activity mask is shared across channels: take channel 0
            any_active = mask[:, 0]
            mean_patch = np.tensordot(any_active, patches,
                                      axes=([0, 1, 2, 3], [0, 1, 2, 3]))
            denom = max(float(any_active.sum()), 1.0)
        else:
            mean_patch = patches.sum(axis=(0, 1, 2, 3))
            denom = float(bsz * np.prod(layer.hidden_shape[1:]))
        mean_patch = mean_patch / denom
        grad_w = grad_w + (push[:, None, None, None, None]
                           * mean_patch[None]).astype(grad_w.dtype)

    _check_finite(grad_w, grad_hb, grad_vb)
    arrays = {"filters": layer.filters, "hidden_bias": layer.hidden_bias,
              "visible_bias": layer.visible_bias}
    grads = {"filters": grad_w, "hidden_bias": grad_hb, "visible_bias": grad_vb}
    if velocity is None:
        velocity = _new_velocity({k: a.shape for k, a in arrays.items()},
                                 layer.filters.dtype)
    updated = _apply_update(arrays, grads, velocity, lr, momentum)
    new_layer = ConvLayerParams(updated["filters"], updated["hidden_bias"],
                                updated["visible_bias"], layer.stride)
    diag = StepDiagnostics(_xent(v0, v_mean), float(h_stat0.mean()),
                           float(np.sqrt(sum((g.astype(np.float64) ** 2).sum()
                                             for g in grads.values()))))
    return CDStepResult(new_layer, velocity, diag)


def _coverage_mask(layer: ConvLayerParams, mask: np.ndarray) -> np.ndarray:
    """Visible units covered by at least one active hidden receptive field."""
    k, s = layer.kernel, layer.stride
    bsz = mask.shape[0]
    cov = np.zeros((bsz,) + layer.visible_shape, dtype=mask.dtype)
    j1, j2, j3 = layer.hidden_shape[1:]
    any_mask = mask.max(axis=1)  # (B, J1, J2, J3); mask is shared across channels
    for a in range(k):
        for b in range(k):
            for c in range(k):
                view = cov[:, :, a:a + s * j1:s, b:b + s * j2:s, c:c + s * j3:s]
                np.maximum(view, any_mask[:, None], out=view)
    return cov


def _cd_step_dense(layer: DenseLayerParams, batch: np.ndarray, cfg: TrainConfig,
                   rng, velocity, lr, momentum) -> CDStepResult:
    v0 = np.asarray(batch, dtype=layer.weights.dtype).reshape(len(batch), -1)
    if v0.shape[1:] != layer.visible_shape:
        raise DataError("batch shape does not match the dense layer")
    bsz = v0.shape[0]
    h_mean0 = sigmoid(v0 @ layer.weights.T + layer.hidden_bias)
    h = _bernoulli(h_mean0, rng)
    v_mean = v = h_mean = None
    for _ in range(cfg.cd_k):
        v_mean = sigmoid(h @ layer.weights + layer.visible_bias)
        v = _bernoulli(v_mean, rng)
        h_mean = sigmoid(v @ layer.weights.T + layer.hidden_bias)
        h = _bernoulli(h_mean, rng)
    grad_w = (h_mean0.T @ v0 - h_mean.T @ v) / bsz - cfg.weight_decay * layer.weights
    grad_hb = (h_mean0 - h_mean).mean(axis=0)
    grad_vb = (v0 - v).mean(axis=0)
    _check_finite(grad_w, grad_hb, grad_vb)
    arrays = {"weights": layer.weights, "hidden_bias": layer.hidden_bias,
              "visible_bias": layer.visible_bias}
    grads = {"weights": grad_w, "hidden_bias": grad_hb, "visible_bias": grad_vb}
    if velocity is None:
        velocity = _new_velocity({k: a.shape for k, a in arrays.items()},
                                 layer.weights.dtype)
    updated = _apply_update(arrays, grads, velocity, lr, momentum)
    new_layer = DenseLayerParams(updated["weights"], updated["hidden_bias"],
                                 updated["visible_bias"])
    diag = StepDiagnostics(_xent(v0, v_mean), float(h_mean0.mean()),
                           float(np.sqrt(sum((g.astype(np.float64) ** 2).sum()
                                             for g in grads.values()))))
    return CDStepResult(new_layer, velocity, diag)


def _label_blocks(top: TopLayerParams, labels: np.ndarray) -> np.ndarray:
    """(B, K*dup) tied-value blocks for a label vector."""
    k, dup = top.num_classes, top.dup
    blocks = np.zeros((len(labels), k * dup), dtype=top.label_weights.dtype)
    for i, y in enumerate(labels):
        if not 0 <= y < k:
            raise DataError(f"label {y} out of range for K={k}")
        blocks[i, y * dup:(y + 1) * dup] = 1
    return blocks


def _top_hidden_mean_batch(top: TopLayerParams, feats: np.ndarray,
                           blocks: np.ndarray, fw=None, lw=None, hb=None) -> np.ndarray:
    fw = top.feature_weights if fw is None else fw
    lw = top.label_weights if lw is None else lw
    hb = top.hidden_bias if hb is None else hb
    return sigmoid(feats @ fw.T + blocks @ lw.T + hb)


def _top_sample_labels(top: TopLayerParams, hidden: np.ndarray, rng,
                       lw=None, lb=None) -> np.ndarray:
    lw = top.label_weights if lw is None else lw
    lb = top.label_bias if lb is None else lb
    h_units = lw.shape[0]
    gw = lw.reshape(h_units, top.num_classes, top.dup).sum(axis=2)
    gb = lb.reshape(top.num_classes, top.dup).sum(axis=1)
    scores = (hidden @ gw + gb).astype(np.float64)
    scores -= scores.max(axis=1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=1, keepdims=True)
    u = rng.random(len(hidden))
    cum = np.cumsum(probs, axis=1)
    return np.minimum((u[:, None] > cum).sum(axis=1), top.num_classes - 1)


def _top_gibbs_step(top: TopLayerParams, feats, blocks, rng,
                    fw=None, lw=None, hb=None, fb=None, lb=None):
    """One full alternation; returns (new feats, new blocks, hidden means)."""
    fw = top.feature_weights if fw is None else fw
    lw = top.label_weights if lw is None else lw
    hb = top.hidden_bias if hb is None else hb
    fb = top.feature_bias if fb is None else fb
    lb = top.label_bias if lb is None else lb
    h_mean = _top_hidden_mean_batch(top, feats, blocks, fw, lw, hb)
    h = _bernoulli(h_mean, rng)
    f_mean = sigmoid(h @ fw + fb)
    new_feats = _bernoulli(f_mean, rng)
    labels = _top_sample_labels(top, h, rng, lw, lb)
    new_blocks = _label_blocks(top, labels)
    h_mean_next = _top_hidden_mean_batch(top, new_feats, new_blocks, fw, lw, hb)
    return new_feats, new_blocks, h_mean_next, f_mean


def _top_grads(top: TopLayerParams, feats0, blocks0, h0, feats1, blocks1, h1,
               weight_decay: float) -> dict:
    bsz, csz = len(feats0), len(feats1)
    return {
        "feature_weights": (h0.T @ feats0) / bsz - (h1.T @ feats1) / csz
            - weight_decay * top.feature_weights,
        "label_weights": (h0.T @ blocks0) / bsz - (h1.T @ blocks1) / csz
            - weight_decay * top.label_weights,
        "hidden_bias": h0.mean(axis=0) - h1.mean(axis=0),
        "feature_bias": feats0.mean(axis=0) - feats1.mean(axis=0),
        "label_bias": blocks0.mean(axis=0) - blocks1.mean(axis=0),
    }


def _top_arrays(top: TopLayerParams) -> dict:
    return {"feature_weights": top.feature_weights, "label_weights": top.label_weights,
            "hidden_bias": top.hidden_bias, "feature_bias": top.feature_bias,
            "label_bias": top.label_bias}


def _top_from_arrays(arrays: dict, dup: int) -> TopLayerParams:
    return TopLayerParams(arrays["feature_weights"], arrays["label_weights"],
                          arrays["hidden_bias"], arrays["feature_bias"],
                          arrays["label_bias"], dup=dup)


def _cd_step_top(top: TopLayerParams, feats: np.ndarray, labels: np.ndarray,
                 cfg: TrainConfig, rng, velocity, lr, momentum) -> CDStepResult:
    feats = np.asarray(feats, dtype=top.feature_weights.dtype)
    blocks0 = _label_blocks(top, labels)
    h0 = _top_hidden_mean_batch(top, feats, blocks0)
    f, blocks = feats, blocks0
    h1 = f_mean = None
    for _ in range(cfg.cd_k):
        hs = _bernoulli(_top_hidden_mean_batch(top, f, blocks), rng)
        f_mean = sigmoid(hs @ top.feature_weights + top.feature_bias)
        f = _bernoulli(f_mean, rng)
        blocks = _label_blocks(top, _top_sample_labels(top, hs, rng))
        h1 = _top_hidden_mean_batch(top, f, blocks)
    grads = _top_grads(top, feats, blocks0, h0, f, blocks, h1, cfg.weight_decay)
    _check_finite(*grads.values())
    arrays = _top_arrays(top)
    if velocity is None:
        velocity = _new_velocity({k: a.shape for k, a in arrays.items()},
                                 top.feature_weights.dtype)
    updated = _apply_update(arrays, grads, velocity, lr, momentum)
    diag = StepDiagnostics(_xent(feats, f_mean), float(h0.mean()),
                           float(np.sqrt(sum((g.astype(np.float64) ** 2).sum()
                                             for g in grads.values()))))
    return CDStepResult(_top_from_arrays(updated, top.dup), velocity, diag)


def cd_step(layer, batch, cfg: TrainConfig, rng, velocity=None,
            lr=None, momentum=None) -> CDStepResult:
    """One CD-k parameter update on a conv, dense or top layer.

    ``batch`` is an array of visible states; for the top layer pass a
    (features, labels) tuple.  Returns the updated layer, the carried
    momentum state and step diagnostics.
    """
    rng = as_generator(rng)
    lr = cfg.learning_rate if lr is None else lr
    momentum = cfg.momentum if momentum is None else momentum
    if isinstance(layer, ConvLayerParams):
        return _cd_step_conv(layer, batch, cfg, rng, velocity, lr, momentum)
    if isinstance(layer, DenseLayerParams):
        return _cd_step_dense(layer, batch, cfg, rng, velocity, lr, momentum)
    if isinstance(layer, TopLayerParams):
        feats, labels = batch
        return _cd_step_top(layer, feats, np.asarray(labels), cfg, rng,
                            velocity, lr, momentum)
    raise DataError("cd_step expects a conv, dense or top layer")


def receptive_field_mask(layer: ConvLayerParams, batch: np.ndarray) -> np.ndarray:
    """(B, C_out, J1, J2, J3) flag: 1 where the data receptive field is non-empty."""
    patches = _conv_patches_batch(layer, batch)
    nonempty = (patches != 0).any(axis=(4, 5, 6, 7))
    mask = nonempty[:, None].astype(layer.filters.dtype)
    return np.broadcast_to(mask, (batch.shape[0],) + layer.hidden_shape).copy()


def masked_sparse_cd_step(layer: ConvLayerParams, batch, cfg: TrainConfig, rng,
                          velocity=None, lr=None, momentum=None) -> CDStepResult:
    """First-layer CD step with empty-receptive-field masking and sparsity.

    Hidden positions whose data receptive field contains no occupied voxel
    are excluded from both phases' statistics, and visible-bias statistics
    are restricted to voxels covered by at least one active position, so an
    all-empty batch changes nothing.  A sparsity term nudges each channel's
    mean activation (over active positions) toward ``sparsity_target``.
    """
    if not isinstance(layer, ConvLayerParams):
        raise DataError("masked_sparse_cd_step applies to conv layers only")
    rng = as_generator(rng)
    lr = cfg.learning_rate if lr is None else lr
    momentum = cfg.momentum if momentum is None else momentum
    batch = np.asarray(batch, dtype=layer.filters.dtype)
    mask = receptive_field_mask(layer, batch)
    return _cd_step_conv(layer, batch, cfg, rng, velocity, lr, momentum,
                         mask=mask, sparsity=True)


# ---------------------------------------------------------------------------
# FPCD for the top layer
# ---------------------------------------------------------------------------

@dataclass
class FPCDState:
    """Fast weights plus the persistent chain state of the top layer."""

    fast: dict
    chain_feats: np.ndarray
    chain_blocks: np.ndarray
    velocity: dict = None

    @classmethod
    def initialize(cls, top: TopLayerParams, n_chains: int, rng) -> "FPCDState":
        rng = as_generator(rng)
        dtype = top.feature_weights.dtype
        fast = {k: np.zeros_like(v) for k, v in _top_arrays(top).items()}
        feats = (rng.random((n_chains, top.feature_units)) < 0.5).astype(dtype)
        labels = rng.integers(0, top.num_classes, size=n_chains)
        return cls(fast, feats, _label_blocks(top, labels))


def fpcd_step(top: TopLayerParams, feats: np.ndarray, labels: np.ndarray,
              cfg: TrainConfig, rng, state: FPCDState,
              lr=None, momentum=None) -> tuple[TopLayerParams, FPCDState, StepDiagnostics]:
    """One FPCD update: negative statistics come from persistent chains
    advanced with the sum of regular and fast weights; fast weights decay
    every step and absorb the gradient at their own rate."""
    rng = as_generator(rng)
    lr = cfg.top_learning_rate if lr is None else lr
    momentum = cfg.momentum if momentum is None else momentum
    feats = np.asarray(feats, dtype=top.feature_weights.dtype)
    labels = np.asarray(labels)
    blocks0 = _label_blocks(top, labels)
    h0 = _top_hidden_mean_batch(top, feats, blocks0)

    fast = state.fast
    comb = {k: v + fast[k] for k, v in _top_arrays(top).items()}
    new_feats, new_blocks, h1, _ = _top_gibbs_step(
        top, state.chain_feats, state.chain_blocks, rng,
        fw=comb["feature_weights"], lw=comb["label_weights"],
        hb=comb["hidden_bias"], fb=comb["feature_bias"], lb=comb["label_bias"])
    state.chain_feats, state.chain_blocks = new_feats, new_blocks

    grads = _top_grads(top, feats, blocks0, h0, new_feats, new_blocks, h1,
                       cfg.weight_decay)
    _check_finite(*grads.values())
    arrays = _top_arrays(top)
    if state.velocity is None:
        state.velocity = _new_velocity({k: a.shape for k, a in arrays.items()},
                                       top.feature_weights.dtype)
    updated = _apply_update(arrays, grads, state.velocity, lr, momentum)
    for k in fast:
        fast[k] = (cfg.fpcd_fast_decay * fast[k]
                   + cfg.fpcd_fast_lr * grads[k]).astype(fast[k].dtype)
    diag = StepDiagnostics(0.0, float(h0.mean()),
                           float(np.sqrt(sum((g.astype(np.float64) ** 2).sum()
                                             for g in grads.values()))))
    return _top_from_arrays(updated, top.dup), state, diag


# ---------------------------------------------------------------------------
# Layer-wise pretraining
# ---------------------------------------------------------------------------

def _grids_to_batch(grids) -> np.ndarray:
    arrs = [np.asarray(g.occupancy if hasattr(g, "occupancy") else g, dtype=np.float32)
            for g in grids]
    return np.stack(arrs)[:, None]


def _layer_mean_up(layer, data: np.ndarray) -> np.ndarray:
    if isinstance(layer, ConvLayerParams):
        return sigmoid(_conv_up_net_batch(layer, data))
    flat = data.reshape(len(data), -1)
    return sigmoid(flat @ layer.weights.T + layer.hidden_bias)


def network_features(net: NetworkParams, data: np.ndarray) -> np.ndarray:
    """Deterministic mean activations entering the top layer, batched."""
    x = data
    for layer in net.conv_layers:
        x = _layer_mean_up(layer, x)
    return _layer_mean_up(net.dense, x)


def pretrain(net: NetworkParams, grids, labels, cfg: TrainConfig,
             diagnostics_path=None) -> NetworkParams:
    """Layer-wise pretraining, bottom-up.

    Layer 1 trains with the masked + sparsity CD step, later conv layers
    and the dense layer with plain CD, the top layer with FPCD on the
    dense-layer means paired with the labels.  Each trained layer is then
    frozen and its mean activations become the next layer's data.
    """
    if len(grids) == 0:
        raise DataError("pretraining requires a non-empty dataset")
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= net.K):
        raise DataError("labels out of range")
    rng = as_generator(cfg.seed)
    rows = []
    data = _grids_to_batch(grids)
    n = len(data)

    conv_layers = list(net.conv_layers)
    for li, layer in enumerate(conv_layers):
        velocity = None
        for epoch in range(cfg.epochs_per_layer):
            momentum = cfg.momentum if epoch >= cfg.momentum_start_epoch else 0.0
            order = rng.permutation(n)
            ep_diag = []
            for start in range(0, n, cfg.batch_size):
                batch = data[order[start:start + cfg.batch_size]]
                if li == 0:
                    res = masked_sparse_cd_step(layer, batch, cfg, rng, velocity,
                                                momentum=momentum)
                else:
                    res = cd_step(layer, batch, cfg, rng, velocity, momentum=momentum)
                layer, velocity = res.params, res.velocity
                ep_diag.append(res.diagnostics)
            rows.append(_diag_row(epoch, f"conv{li + 1}", ep_diag))
        conv_layers[li] = layer
        data = _layer_mean_up(layer, data)

    data = data.reshape(n, -1)
    dense = net.dense
    velocity = None
    for epoch in range(cfg.epochs_per_layer):
        momentum = cfg.momentum if epoch >= cfg.momentum_start_epoch else 0.0
        order = rng.permutation(n)
        ep_diag = []
        for start in range(0, n, cfg.batch_size):
            res = cd_step(dense, data[order[start:start + cfg.batch_size]], cfg, rng,
                          velocity, momentum=momentum)
            dense, velocity = res.params, res.velocity
            ep_diag.append(res.diagnostics)
        rows.append(_diag_row(epoch, "dense", ep_diag))
    feats = _layer_mean_up(dense, data)

    top = net.top
    state = FPCDState.initialize(top, cfg.persistent_chains, rng)
    for epoch in range(cfg.epochs_per_layer):
        momentum = cfg.momentum if epoch >= cfg.momentum_start_epoch else 0.0
        order = rng.permutation(n)
        ep_diag = []
        for start in range(0, n, cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            top, state, diag = fpcd_step(top, feats[sel], labels[sel], cfg, rng,
                                         state, momentum=momentum)
            ep_diag.append(diag)
        rows.append(_diag_row(epoch, "top", ep_diag))

    if diagnostics_path is not None:
        write_diagnostics(rows, diagnostics_path)
    return NetworkParams(conv_layers, dense, top, net.input_dims, net.payload_origin)


def _diag_row(epoch: int, layer_name: str, diags) -> dict:
    return {
        "epoch": epoch,
        "layer": layer_name,
        "recon_xent": float(np.mean([d.recon_xent for d in diags])) if diags else 0.0,
        "mean_hidden_act": float(np.mean([d.mean_hidden_act for d in diags])) if diags else 0.0,
        "grad_norm": float(np.mean([d.grad_norm for d in diags])) if diags else 0.0,
    }


def write_diagnostics(rows, path) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["epoch", "layer", "recon_xent", "mean_hidden_act", "grad_norm"])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v)
                             for k, v in row.items()})


# ---------------------------------------------------------------------------
# Wake-sleep generative fine-tuning (tied weights)
# ---------------------------------------------------------------------------

def wake_sleep_finetune(net: NetworkParams, grids, labels, cfg: TrainConfig,
                        epochs=None, lr=None) -> NetworkParams:
    """Generative fine-tuning with one tied weight set per layer.

    Wake phase: a stochastic bottom-up pass collects positive statistics at
    every layer.  Sleep phase: a persistent chain on the top layer is
    advanced and propagated top-down to collect negative statistics.
    """
    epochs = cfg.wake_sleep_epochs if epochs is None else epochs
    lr = cfg.wake_sleep_learning_rate if lr is None else lr
    labels = np.asarray(labels)
    rng = as_generator(np.random.SeedSequence(cfg.seed, spawn_key=(11,)))
    data = _grids_to_batch(grids)
    n = len(data)

    conv_layers = list(net.conv_layers)
    dense = net.dense
    top = net.top
    n_chains = cfg.persistent_chains
    dtype = top.feature_weights.dtype
    chain_feats = (rng.random((n_chains, top.feature_units)) < 0.5).astype(dtype)
    chain_blocks = _label_blocks(top, rng.integers(0, top.num_classes, size=n_chains))

    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch_idx = order[start:start + cfg.batch_size]
            x = data[batch_idx]
            y = labels[batch_idx]
            # wake: bottom-up sampling, positive statistics per layer
            states = [x]
            cur = x
            for layer in conv_layers:
                cur = _bernoulli(sigmoid(_conv_up_net_batch(layer, cur)), rng)
                states.append(cur)
            flat = cur.reshape(len(cur), -1)
            s_dense = _bernoulli(sigmoid(flat @ dense.weights.T + dense.hidden_bias), rng)
            states.append(s_dense)
            blocks = _label_blocks(top, y)
            h_top = _bernoulli(_top_hidden_mean_batch(top, s_dense, blocks), rng)

            # sleep: advance the persistent top chain, then generate downwards
            comb_h = _bernoulli(_top_hidden_mean_batch(top, chain_feats, chain_blocks), rng)
            chain_feats = _bernoulli(sigmoid(comb_h @ top.feature_weights
                                             + top.feature_bias), rng)
            chain_blocks = _label_blocks(top, _top_sample_labels(top, comb_h, rng))
            h_top_neg = _bernoulli(_top_hidden_mean_batch(top, chain_feats, chain_blocks),
                                   rng)
            neg_states = [None] * (len(conv_layers) + 2)
            neg_states[-1] = chain_feats
            v = _bernoulli(sigmoid(chain_feats @ dense.weights + dense.visible_bias), rng)
            neg_states[-2] = v
            cur = v.reshape((n_chains,) + conv_layers[-1].hidden_shape) \
                if conv_layers else v
            for li in range(len(conv_layers) - 1, -1, -1):
                layer = conv_layers[li]
                vis = _bernoulli(sigmoid(_conv_down_linear_batch(layer, cur)
                                         + layer.visible_bias), rng)
                neg_states[li] = vis
                if li > 0:
                    cur = vis

            bsz = len(x)
            for li, layer in enumerate(conv_layers):
                pos_v, pos_h = states[li], states[li + 1]
                neg_h = neg_states[li + 1] if li + 1 < len(conv_layers) else \
                    neg_states[-2].reshape((n_chains,) + layer.hidden_shape)
                neg_v = neg_states[li]
                gw = _conv_grad_filters_batch(layer, pos_v, pos_h) \
                    - _conv_grad_filters_batch(layer, neg_v, neg_h) \
                    - cfg.weight_decay * layer.filters
                ghb = pos_h.sum(axis=(2, 3, 4)).mean(axis=0) \
                    - neg_h.sum(axis=(2, 3, 4)).mean(axis=0)
                gvb = pos_v.mean(axis=0) - neg_v.mean(axis=0)
                _check_finite(gw, ghb, gvb)
                conv_layers[li] = ConvLayerParams(
                    (layer.filters + lr * gw).astype(dtype),
                    (layer.hidden_bias + lr * ghb).astype(dtype),
                    (layer.visible_bias + lr * gvb).astype(dtype),
                    layer.stride)

            pos_v = states[len(conv_layers)].reshape(bsz, -1)
            gw = (states[-1].T @ pos_v) / bsz - (neg_states[-1].T @ neg_states[-2]) / n_chains \
                - cfg.weight_decay * dense.weights
            ghb = states[-1].mean(axis=0) - neg_states[-1].mean(axis=0)
            gvb = pos_v.mean(axis=0) - neg_states[-2].mean(axis=0)
            _check_finite(gw, ghb, gvb)
            dense = DenseLayerParams((dense.weights + lr * gw).astype(dtype),
                                     (dense.hidden_bias + lr * ghb).astype(dtype),
                                     (dense.visible_bias + lr * gvb).astype(dtype))

            grads = _top_grads(top, states[-1], blocks, h_top,
                               chain_feats, chain_blocks, h_top_neg, cfg.weight_decay)
            _check_finite(*grads.values())
            arrays = _top_arrays(top)
            top = _top_from_arrays({k: (arrays[k] + lr * grads[k]).astype(dtype)
                                    for k in arrays}, top.dup)
    return NetworkParams(conv_layers, dense, top, net.input_dims, net.payload_origin)


# ---------------------------------------------------------------------------
# Discriminative fine-tuning
# ---------------------------------------------------------------------------

def _forward_discriminative(net: NetworkParams, x: np.ndarray):
    """Feed-forward pass; returns activations per layer plus class logits.

    The top layer is read out by collapsing the duplicated label weights
    into per-class sums.
    """
    acts = [x]
    cur = x
    for layer in net.conv_layers:
        cur = sigmoid(_conv_up_net_batch(layer, cur))
        acts.append(cur)
    flat = cur.reshape(len(cur), -1)
    a_dense = sigmoid(flat @ net.dense.weights.T + net.dense.hidden_bias)
    acts.append(a_dense)
    a_top = sigmoid(a_dense @ net.top.feature_weights.T + net.top.hidden_bias)
    acts.append(a_top)
    gw = net.top.group_weight_sums()
    logits = a_top @ gw + net.top.group_bias_sums()
    return acts, logits


def discriminative_loss_and_grads(net: NetworkParams, x: np.ndarray,
                                  labels: np.ndarray):
    """Mean cross-entropy and its gradients for a batch.

    Gradients cover every feed-forward parameter: conv filters and hidden
    biases, dense weights and hidden bias, top feature weights, hidden
    bias, label weights and label bias.
    """
    labels = np.asarray(labels)
    acts, logits = _forward_discriminative(net, x)
    bsz = len(x)
    logits64 = logits.astype(np.float64)
    logits64 -= logits64.max(axis=1, keepdims=True)
    e = np.exp(logits64)
    probs = e / e.sum(axis=1, keepdims=True)
    nll = -np.log(np.clip(probs[np.arange(bsz), labels], 1e-12, None))
    loss = float(nll.mean())

    dlogits = probs.copy()
    dlogits[np.arange(bsz), labels] -= 1.0
    dlogits /= bsz
    dlogits = dlogits.astype(acts[-1].dtype)

    top = net.top
    a_top, a_dense = acts[-1], acts[-2]
    grads = {}
    grads["top.label_weights"] = np.repeat(a_top.T @ dlogits, top.dup, axis=1)
    grads["top.label_bias"] = np.repeat(dlogits.sum(axis=0), top.dup)
    da_top = dlogits @ top.group_weight_sums().T
    dnet_top = da_top * a_top * (1 - a_top)
    grads["top.feature_weights"] = dnet_top.T @ a_dense
    grads["top.hidden_bias"] = dnet_top.sum(axis=0)

    da_dense = dnet_top @ top.feature_weights
    dnet_dense = da_dense * a_dense * (1 - a_dense)
    flat_in = acts[len(net.conv_layers)].reshape(bsz, -1)
    grads["dense.weights"] = dnet_dense.T @ flat_in
    grads["dense.hidden_bias"] = dnet_dense.sum(axis=0)

    dflat = dnet_dense @ net.dense.weights
    dcur = dflat.reshape((bsz,) + net.conv_layers[-1].hidden_shape) \
        if net.conv_layers else None
    for li in range(len(net.conv_layers) - 1, -1, -1):
        layer = net.conv_layers[li]
        a_h = acts[li + 1]
        dnet = dcur * a_h * (1 - a_h)
        grads[f"conv{li}.filters"] = _conv_grad_filters_batch(layer, acts[li], dnet) * bsz
        grads[f"conv{li}.hidden_bias"] = dnet.sum(axis=(0, 2, 3, 4))
        if li > 0:
            dcur = _conv_down_linear_batch(layer, dnet)
    return loss, grads


def _apply_discriminative_update(net: NetworkParams, grads: dict, lr: float,
                                 weight_decay: float) -> NetworkParams:
    conv_layers = []
    for li, layer in enumerate(net.conv_layers):
        conv_layers.append(ConvLayerParams(
            (layer.filters - lr * (grads[f"conv{li}.filters"]
                                   + weight_decay * layer.filters)).astype(layer.filters.dtype),
            (layer.hidden_bias - lr * grads[f"conv{li}.hidden_bias"]).astype(
                layer.hidden_bias.dtype),
            layer.visible_bias, layer.stride))
    dense = DenseLayerParams(
        (net.dense.weights - lr * (grads["dense.weights"]
                                   + weight_decay * net.dense.weights)).astype(
            net.dense.weights.dtype),
        (net.dense.hidden_bias - lr * grads["dense.hidden_bias"]).astype(
            net.dense.hidden_bias.dtype),
        net.dense.visible_bias)
    top = net.top
    new_top = TopLayerParams(
        (top.feature_weights - lr * (grads["top.feature_weights"]
                                     + weight_decay * top.feature_weights)).astype(
            top.feature_weights.dtype),
        (top.label_weights - lr * (grads["top.label_weights"]
                                   + weight_decay * top.label_weights)).astype(
            top.label_weights.dtype),
        (top.hidden_bias - lr * grads["top.hidden_bias"]).astype(top.hidden_bias.dtype),
        top.feature_bias,
        (top.label_bias - lr * grads["top.label_bias"]).astype(top.label_bias.dtype),
        dup=top.dup)
    return NetworkParams(conv_layers, dense, new_top, net.input_dims, net.payload_origin)


def discriminative_finetune(net: NetworkParams, observations, labels,
                            cfg: TrainConfig, epochs=None, lr=None) -> NetworkParams:
    """Cross-entropy gradient descent on the feed-forward reading of the net.

    Observations are binarized with Surface as 1 and both Free and Unknown
    as 0; plain voxel grids are accepted as already-binary input.
    """
    epochs = cfg.finetune_epochs if epochs is None else epochs
    lr = cfg.finetune_learning_rate if lr is None else lr
    labels = np.asarray(labels)
    xs = []
    for ob in observations:
        if hasattr(ob, "binarize"):
            xs.append(ob.binarize())
        else:
            xs.append(np.asarray(ob.occupancy if hasattr(ob, "occupancy") else ob,
                                 dtype=np.float32))
    data = np.stack(xs)[:, None]
    n = len(data)
    rng = as_generator(np.random.SeedSequence(cfg.seed, spawn_key=(13,)))
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            loss, grads = discriminative_loss_and_grads(net, data[sel], labels[sel])
            if not np.isfinite(loss):
                raise NumericError("non-finite discriminative loss")
            net = _apply_discriminative_update(net, grads, lr, cfg.weight_decay)
    return net
