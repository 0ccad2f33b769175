"""ADAM training loop with per-epoch re-excerpting and early stopping."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import FeatureSet, NormalizationStats, epoch_rng, make_batches
from .errors import NonFiniteGradient
from .model import ModelConfig, ModelParams, batch_loss, init_params, loss_and_grad

log = logging.getLogger(__name__)

MAX_EPOCHS_CAP = 50


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 50
    patience: int = 10
    batch_size: int = 32
    seed: int = 0
    excerpt_frames: int = 500

    def __post_init__(self):
        if not 1 <= self.max_epochs <= MAX_EPOCHS_CAP:
            raise ValueError(f"max_epochs must lie in [1, {MAX_EPOCHS_CAP}]")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    wall_time_s: float


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopping_epoch: int = 0

    @property
    def best_val_loss(self) -> float:
        return min(e.val_loss for e in self.epochs)

    def to_jsonl(self, include_time: bool = True) -> str:
        lines = []
        for e in self.epochs:
            rec = asdict(e)
            if not include_time:
                rec.pop("wall_time_s")
            lines.append(json.dumps(rec, sort_keys=True))
        lines.append(json.dumps({"best_epoch": self.best_epoch, "stopping_epoch": self.stopping_epoch}))
        return "\n".join(lines) + "\n"


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls({k: np.zeros_like(w) for k, w in params.weights.items()},
                   {k: np.zeros_like(w) for k, w in params.weights.items()})


def check_finite(grads: dict[str, np.ndarray]) -> None:
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradient(f"non-finite gradient in {', '.join(bad)}", bad)


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState, t: int,
              config: TrainConfig) -> tuple[ModelParams, AdamState]:
    """Bias-corrected ADAM update; returns new params and moments, inputs untouched."""
    if t < 1:
        raise ValueError("ADAM step counter starts at 1")
    check_finite(grads)
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_w, new_m, new_v = {}, {}, {}
    for name, w in params.weights.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        step = config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        new_w[name] = (w - step).astype(w.dtype)
        new_m[name] = m.astype(w.dtype)
        new_v[name] = v.astype(w.dtype)
    out = ModelParams(params.config, new_w, params.feature_kind, params.stats)
    return out, AdamState(new_m, new_v, t)


def evaluate_loss(params: ModelParams, fs: FeatureSet, stats: NormalizationStats | None, n_frames: int,
                  batch_size: int = 32, seed: int = 0) -> float:
    """Mean loss over a feature set; excerpts drawn from a fixed seed."""
    total, n = 0.0, 0
    for batch in make_batches(fs, batch_size, epoch_rng(seed, 0), n_frames, stats, shuffle=False,
                              dtype=params.dtype):
        total += float(batch_loss(params, batch.X, batch.k).sum())
        n += len(batch.k)
    return total / n


def train(train_set: FeatureSet, val_set: FeatureSet, model_config: ModelConfig, config: TrainConfig,
          stats: NormalizationStats | None = None, dtype=np.float32, init: ModelParams | None = None,
          on_epoch=None) -> tuple[ModelParams, TrainLog]:
    """Train until validation loss stalls for ``patience`` epochs or ``max_epochs``.

    Returns the parameters of the best validation epoch.
    """
    params = init if init is not None else init_params(model_config, [config.seed, 1], dtype)
    state = AdamState.zeros_like(params)
    train_log = TrainLog()
    best = params.copy()
    best_loss = np.inf
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        losses, counts = [], []
        for batch in make_batches(train_set, config.batch_size, epoch_rng(config.seed, epoch),
                                  config.excerpt_frames, stats, dtype=dtype):
            value, grads = loss_and_grad(params, batch.X, batch.k)
            params, state = adam_step(params, grads, state, state.t + 1, config)
            losses.append(value)
            counts.append(len(batch.k))
        train_loss = float(np.average(losses, weights=counts))
        val_loss = evaluate_loss(params, val_set, stats, config.excerpt_frames, config.batch_size, config.seed)
        record = EpochRecord(epoch, train_loss, val_loss, time.perf_counter() - t0)
        train_log.epochs.append(record)
        log.info("epoch %d train %.4f val %.4f (%.1fs)", epoch, train_loss, val_loss, record.wall_time_s)
        if on_epoch is not None:
            on_epoch(record)
        if val_loss < best_loss:
            best_loss, best, since_best = val_loss, params.copy(), 0
            train_log.best_epoch = epoch
        else:
            since_best += 1
        train_log.stopping_epoch = epoch
        if since_best >= config.patience:
            break
    best.stats = stats
    return best, train_log
