"""Stacked bi-directional LSTM count estimator with three output heads.

Architecture: three BLSTM layers (per-direction sizes 30, 20, 40 by default),
each consuming the concatenated forward/backward outputs of the previous
layer; non-overlapping temporal max pooling of size 2; a dense layer on the
flattened pooled sequence; and a head activation (softmax, linear or
exponential).

Both directions of a layer are advanced in a single time loop: the backward
direction is fed the time-reversed input and its weights are stacked with the
forward direction's along a leading axis of size 2, and the compiled
recurrences in :mod:`countkit._kernels` walk both.

Gate layout inside every ``4H`` block is ``(input, forget, output, cell)``.
"""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from ._kernels import lstm_backward, lstm_forward
from .errors import LabelOutOfRange, ShapeMismatch
from .tensorio import read_tensors, write_tensors

DEFAULT_LAYER_SIZES = (30, 20, 40)
POOL_SIZE = 2


class HeadKind(str, enum.Enum):
    CLASSIFICATION = "classification"
    GAUSSIAN = "gauss"
    POISSON = "poisson"


@dataclass(frozen=True)
class ModelConfig:
    n_features: int
    n_frames: int
    head_kind: HeadKind
    k_max: int
    layer_sizes: tuple[int, ...] = DEFAULT_LAYER_SIZES

    @property
    def pooled_frames(self) -> int:
        return -(-self.n_frames // POOL_SIZE)

    @property
    def output_dim(self) -> int:
        return self.k_max + 1 if self.head_kind == HeadKind.CLASSIFICATION else 1

    @property
    def dense_inputs(self) -> int:
        return self.pooled_frames * 2 * self.layer_sizes[-1]


@dataclass
class ModelParams:
    config: ModelConfig
    weights: dict[str, np.ndarray]
    feature_kind: str | None = None
    stats: object | None = None

    @property
    def head_kind(self) -> HeadKind:
        return self.config.head_kind

    @property
    def k_max(self) -> int:
        return self.config.k_max

    @property
    def dtype(self):
        return self.weights["dense.W"].dtype

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.weights.items()}, self.feature_kind, self.stats)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.config, {k: v.astype(dtype) for k, v in self.weights.items()}, self.feature_kind, self.stats
        )

    def n_parameters(self) -> int:
        return sum(v.size for v in self.weights.values())


def weight_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    n_in = config.n_features
    for layer, h in enumerate(config.layer_sizes):
        shapes[f"lstm{layer}.Wx"] = (2, n_in, 4 * h)
        shapes[f"lstm{layer}.Wh"] = (2, h, 4 * h)
        shapes[f"lstm{layer}.b"] = (2, 4 * h)
        n_in = 2 * h
    shapes["dense.W"] = (config.dense_inputs, config.output_dim)
    shapes["dense.b"] = (config.output_dim,)
    return shapes


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(config: ModelConfig, rng_seed, dtype=np.float64) -> ModelParams:
    """Glorot-uniform matrices, zero biases except forget gates at 1.0."""
    rng = np.random.default_rng(rng_seed)
    weights = {}
    for name, shape in weight_shapes(config).items():
        if name.endswith(".b"):
            w = np.zeros(shape)
            if name.startswith("lstm"):
                h = shape[-1] // 4
                w[..., h : 2 * h] = 1.0
        else:
            fan_in, fan_out = shape[-2], shape[-1]
            bound = glorot_bound(fan_in, fan_out)
            w = rng.uniform(-bound, bound, size=shape)
        weights[name] = w.astype(dtype)
    return ModelParams(config, weights)


# ---------------------------------------------------------------------------
# BLSTM layer
# ---------------------------------------------------------------------------


@dataclass
class _LayerCache:
    x: np.ndarray  # (D, B, In) layer input, natural time order
    acts: np.ndarray  # (2, D, B, 4H) gate activations, processing order
    cs: np.ndarray  # (2, D, B, H) cell states
    tcs: np.ndarray  # (2, D, B, H) tanh of cell states
    hs: np.ndarray  # (2, D, B, H) hidden states


def _blstm_forward(x, Wx, Wh, b):
    """x: (D, B, In) time-major. Returns (D, B, 2H) output and cache."""
    D, B, n_in = x.shape
    H = Wh.shape[1]
    x2 = x.reshape(D * B, n_in)
    xproj = np.empty((2, D, B, 4 * H), dtype=x.dtype)
    xproj[0] = (x2 @ Wx[0]).reshape(D, B, 4 * H)
    xproj[1] = (x2 @ Wx[1]).reshape(D, B, 4 * H)[::-1]
    xproj += b[:, None, None, :]
    dtype = x.dtype
    acts = np.empty((2, D, B, 4 * H), dtype=dtype)
    cs = np.empty((2, D, B, H), dtype=dtype)
    tcs = np.empty((2, D, B, H), dtype=dtype)
    hs = np.empty((2, D, B, H), dtype=dtype)
    lstm_forward(xproj, np.ascontiguousarray(Wh), acts, cs, tcs, hs)
    out = np.concatenate([hs[0], hs[1][::-1]], axis=-1)
    return out, _LayerCache(x, acts, cs, tcs, hs)


def _blstm_backward(dout, cache: _LayerCache, Wx, Wh, need_dx: bool = True):
    """dout: (D, B, 2H). Returns (dx, dWx, dWh, db); dx is None unless needed."""
    D, B, H2 = dout.shape
    H = H2 // 2
    acts, cs, tcs, hs = cache.acts, cache.cs, cache.tcs, cache.hs
    dH = np.empty((2, D, B, H), dtype=dout.dtype)
    dH[0] = dout[..., :H]
    dH[1] = dout[::-1, :, H:]
    dG = np.empty_like(acts)
    lstm_backward(dH, acts, cs, tcs, np.ascontiguousarray(Wh), dG)

    G = 4 * H
    n_in = cache.x.shape[-1]
    x2 = cache.x.reshape(D * B, n_in)
    # direction 1 gradients back in natural time order, to pair with x
    dG_nat = (dG[0].reshape(D * B, G), np.ascontiguousarray(dG[1][::-1]).reshape(D * B, G))
    dWx = np.stack([x2.T @ g for g in dG_nat])
    dWh = np.empty_like(Wh)
    for z in range(2):
        # h_{t-1} paired with the gate gradient at step t
        dWh[z] = hs[z, :-1].reshape((D - 1) * B, H).T @ dG[z, 1:].reshape((D - 1) * B, G)
    db = dG.sum(axis=(1, 2))
    dx = None
    if need_dx:
        dx = (dG_nat[0] @ Wx[0].T + dG_nat[1] @ Wx[1].T).reshape(D, B, n_in)
    return dx, dWx, dWh, db


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------


def max_pool_time(x):
    """Max over non-overlapping pairs of frames; an odd tail frame passes through.

    x: (D, B, C). Returns pooled (ceil(D/2), B, C) and a mask that is True where
    the second frame of a pair won (ties go to the first).
    """
    D = x.shape[0]
    even = D - D % 2
    first, second = x[0:even:2], x[1:even:2]
    took_second = second > first
    pooled = np.where(took_second, second, first)
    if D % 2:
        pooled = np.concatenate([pooled, x[-1:]], axis=0)
    return pooled, took_second


def max_pool_time_backward(dpooled, took_second, D):
    dx = np.zeros((D,) + dpooled.shape[1:], dtype=dpooled.dtype)
    n_pairs = took_second.shape[0]
    dp = dpooled[:n_pairs]
    dx[0 : 2 * n_pairs : 2] = np.where(took_second, 0.0, dp)
    dx[1 : 2 * n_pairs : 2] = np.where(took_second, dp, 0.0)
    if D % 2:
        dx[-1] = dpooled[-1]
    return dx


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------


@dataclass
class HeadOutput:
    kind: HeadKind
    value: np.ndarray | float

    @property
    def probabilities(self) -> np.ndarray:
        if self.kind != HeadKind.CLASSIFICATION:
            raise AttributeError("only classification heads emit probabilities")
        return np.asarray(self.value)

    def to_json(self):
        v = self.value
        return {"kind": self.kind.value, "value": v.tolist() if isinstance(v, np.ndarray) else float(v)}


def activate(kind: HeadKind, z: np.ndarray) -> np.ndarray:
    """Head activation on pre-activations ``z`` of shape (B, out)."""
    if kind == HeadKind.CLASSIFICATION:
        return np.exp(z - logsumexp(z, axis=1, keepdims=True))
    if kind == HeadKind.GAUSSIAN:
        return z.copy()
    return np.exp(z)


def _check_labels(kind: HeadKind, k, k_max: int):
    k = np.asarray(k)
    if np.any(k < 0):
        raise LabelOutOfRange("counts must be non-negative")
    if kind == HeadKind.CLASSIFICATION and np.any(k > k_max):
        raise LabelOutOfRange(f"count exceeds k_max={k_max}")
    return k


def losses_from_preactivation(kind: HeadKind, z: np.ndarray, k, k_max: int) -> np.ndarray:
    """Per-sample loss for pre-activations ``z`` (B, out) and integer counts ``k`` (B,)."""
    k = _check_labels(kind, k, k_max).astype(int)
    if kind == HeadKind.CLASSIFICATION:
        logp = z - logsumexp(z, axis=1, keepdims=True)
        return -logp[np.arange(len(k)), k]
    if kind == HeadKind.GAUSSIAN:
        return (z[:, 0] - k) ** 2
    lgam = np.array([math.lgamma(v + 1.0) for v in k])
    return np.exp(z[:, 0]) - k * z[:, 0] + lgam


def preactivation_grad(kind: HeadKind, z: np.ndarray, k) -> np.ndarray:
    """d loss / d z per sample, shape (B, out)."""
    k = np.asarray(k, dtype=int)
    if kind == HeadKind.CLASSIFICATION:
        g = activate(kind, z)
        g[np.arange(len(k)), k] -= 1.0
        return g
    if kind == HeadKind.GAUSSIAN:
        return (2.0 * (z[:, 0] - k))[:, None]
    return (np.exp(z[:, 0]) - k)[:, None]


def loss(output: HeadOutput, k: int, k_max: int | None = None) -> float:
    """Loss of a single head output against a true count."""
    if k < 0:
        raise LabelOutOfRange("counts must be non-negative")
    if output.kind == HeadKind.CLASSIFICATION:
        p = output.probabilities
        if k >= len(p):
            raise LabelOutOfRange(f"count {k} outside {len(p)} classes")
        return float(-np.log(max(p[k], np.finfo(float).tiny)))
    y = float(output.value)
    if output.kind == HeadKind.GAUSSIAN:
        return (y - k) ** 2
    return y - k * math.log(y) + math.lgamma(k + 1.0)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    x: np.ndarray
    layers: list = field(default_factory=list)
    pre_pool: np.ndarray | None = None
    took_second: np.ndarray | None = None
    flat: np.ndarray | None = None
    z: np.ndarray | None = None


def _check_input(params: ModelParams, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=params.dtype)
    if X.ndim == 2:
        X = X[None]
    cfg = params.config
    if X.ndim != 3 or X.shape[2] != cfg.n_features or X.shape[1] != cfg.n_frames:
        raise ShapeMismatch(
            f"expected input (*, {cfg.n_frames}, {cfg.n_features}), got {tuple(X.shape)}"
        )
    if cfg.n_frames < 2:
        raise ShapeMismatch("need at least two frames")
    return X


def forward_batch(params: ModelParams, X: np.ndarray, keep_cache: bool = False):
    """Pre-activations ``z`` (B, out) for a batch ``X`` (B, D, F)."""
    X = _check_input(params, X)
    w = params.weights
    h = np.ascontiguousarray(X.transpose(1, 0, 2))
    cache = ForwardCache(x=h) if keep_cache else None
    for layer in range(len(params.config.layer_sizes)):
        h, lc = _blstm_forward(h, w[f"lstm{layer}.Wx"], w[f"lstm{layer}.Wh"], w[f"lstm{layer}.b"])
        if keep_cache:
            cache.layers.append(lc)
    pooled, took_second = max_pool_time(h)
    B = X.shape[0]
    flat = pooled.transpose(1, 0, 2).reshape(B, -1)
    z = flat @ w["dense.W"] + w["dense.b"]
    if keep_cache:
        cache.pre_pool, cache.took_second, cache.flat, cache.z = h, took_second, flat, z
    return z, cache


def backward_batch(params: ModelParams, cache: ForwardCache, dz: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``sum(dz * z)`` with respect to every weight group."""
    w = params.weights
    grads = {"dense.W": cache.flat.T @ dz, "dense.b": dz.sum(axis=0)}
    D, B, C = cache.pre_pool.shape
    dflat = dz @ w["dense.W"].T
    P = -(-D // POOL_SIZE)
    dpooled = np.ascontiguousarray(dflat.reshape(B, P, C).transpose(1, 0, 2))
    dh = max_pool_time_backward(dpooled, cache.took_second, D)
    for layer in reversed(range(len(params.config.layer_sizes))):
        Wx, Wh = w[f"lstm{layer}.Wx"], w[f"lstm{layer}.Wh"]
        dh, dWx, dWh, db = _blstm_backward(dh, cache.layers[layer], Wx, Wh, need_dx=layer > 0)
        grads[f"lstm{layer}.Wx"] = dWx
        grads[f"lstm{layer}.Wh"] = dWh
        grads[f"lstm{layer}.b"] = db
    return grads


def forward(params: ModelParams, X: np.ndarray) -> HeadOutput:
    """Head output for a single standardized D x F matrix."""
    z, _ = forward_batch(params, X)
    a = activate(params.head_kind, z)[0]
    if params.head_kind == HeadKind.CLASSIFICATION:
        return HeadOutput(params.head_kind, a)
    return HeadOutput(params.head_kind, float(a[0]))


def predict_batch(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """Activated head outputs (B, out)."""
    z, _ = forward_batch(params, X)
    return activate(params.head_kind, z)


def loss_and_grad(params: ModelParams, X: np.ndarray, k) -> tuple[float, dict[str, np.ndarray]]:
    """Mean batch loss and its exact gradient."""
    z, cache = forward_batch(params, X, keep_cache=True)
    k = np.atleast_1d(np.asarray(k))
    per_sample = losses_from_preactivation(params.head_kind, z, k, params.k_max)
    dz = preactivation_grad(params.head_kind, z, k) / len(k)
    return float(per_sample.mean()), backward_batch(params, cache, dz.astype(z.dtype))


def backward(params: ModelParams, X: np.ndarray, k: int) -> dict[str, np.ndarray]:
    """Gradient of the single-sample loss with respect to every weight group."""
    return loss_and_grad(params, X, [k])[1]


def batch_loss(params: ModelParams, X: np.ndarray, k) -> np.ndarray:
    z, _ = forward_batch(params, X)
    return losses_from_preactivation(params.head_kind, z, np.atleast_1d(k), params.k_max)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(ckpt_dir, params: ModelParams, stats_file: str | None = None) -> None:
    """Write ``checkpoint.json`` and ``weights.ctk`` into ``ckpt_dir`` (32-bit weights).

    Normalisation statistics attached to ``params`` are saved next to them
    as ``stats.json`` unless ``stats_file`` points elsewhere.
    """
    os.makedirs(ckpt_dir, exist_ok=True)
    cfg = params.config
    if stats_file is None and params.stats is not None:
        stats_file = "stats.json"
        params.stats.save(os.path.join(ckpt_dir, stats_file))
    manifest = {
        "head_kind": cfg.head_kind.value,
        "k_max": cfg.k_max,
        "feature_kind": params.feature_kind,
        "layer_sizes": list(cfg.layer_sizes),
        "n_features": cfg.n_features,
        "n_frames": cfg.n_frames,
        "stats_file": stats_file,
        "weights_file": "weights.ctk",
    }
    write_tensors(os.path.join(ckpt_dir, "weights.ctk"), params.weights, dtype="f32")
    with open(os.path.join(ckpt_dir, "checkpoint.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_checkpoint(ckpt_dir) -> tuple[ModelParams, dict]:
    with open(os.path.join(ckpt_dir, "checkpoint.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    cfg = ModelConfig(
        n_features=manifest["n_features"],
        n_frames=manifest["n_frames"],
        head_kind=HeadKind(manifest["head_kind"]),
        k_max=manifest["k_max"],
        layer_sizes=tuple(manifest["layer_sizes"]),
    )
    weights, _ = read_tensors(os.path.join(ckpt_dir, manifest["weights_file"]))
    expected = weight_shapes(cfg)
    for name, shape in expected.items():
        if name not in weights or weights[name].shape != shape:
            raise ShapeMismatch(f"checkpoint weight {name} missing or misshapen")
    params = ModelParams(cfg, weights, manifest.get("feature_kind"))
    if manifest.get("stats_file"):
        from .dataset import NormalizationStats

        params.stats = NormalizationStats.load(os.path.join(ckpt_dir, manifest["stats_file"]))
    return params, manifest
