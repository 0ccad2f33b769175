import json

import numpy as np
import pytest

from countkit import training
from countkit.dataset import FeatureSet
from countkit.dsp import FeatureKind
from countkit.errors import NonFiniteGradient
from countkit.mixer import compute_k
from countkit.model import HeadKind, ModelConfig, init_params, loss_and_grad
from countkit.training import AdamState, TrainConfig, adam_step, train


def _params():
    return init_params(ModelConfig(3, 6, HeadKind.GAUSSIAN, 3, (2, 2, 2)), 0)


def test_config_limits():
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=51)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    assert TrainConfig().learning_rate == 1e-3


def test_adam_scalar_oracle():
    p = _params()
    cfg = TrainConfig()
    grads = {n: np.full_like(w, 0.5) for n, w in p.weights.items()}
    state = AdamState.zeros_like(p)
    new, st = adam_step(p, grads, state, 1, cfg)
    # hand computation for one step from zero moments
    m = 0.1 * 0.5
    v = 0.001 * 0.25
    step = 1e-3 * (m / 0.1) / (np.sqrt(v / 0.001) + 1e-8)
    for n in p.weights:
        assert np.allclose(new.weights[n], p.weights[n] - step)
        assert np.allclose(st.m[n], m) and np.allclose(st.v[n], v)
    # second step, continuing the same recurrence
    new2, _ = adam_step(new, grads, st, 2, cfg)
    m2, v2 = 0.9 * m + 0.05, 0.999 * v + 0.001 * 0.25
    step2 = 1e-3 * (m2 / (1 - 0.81)) / (np.sqrt(v2 / (1 - 0.999**2)) + 1e-8)
    assert np.allclose(new2.weights["dense.b"], new.weights["dense.b"] - step2)


def test_adam_zero_gradient_and_determinism():
    p = _params()
    cfg = TrainConfig()
    state = AdamState.zeros_like(p)
    state.m = {n: np.ones_like(w) * 0.0 for n, w in p.weights.items()}
    state.v = {n: np.ones_like(w) for n, w in p.weights.items()}
    zeros = {n: np.zeros_like(w) for n, w in p.weights.items()}
    new, st = adam_step(p, zeros, state, 1, cfg)
    for n in p.weights:
        assert np.array_equal(new.weights[n], p.weights[n])
        assert np.allclose(st.v[n], 0.999)
    a, _ = adam_step(p, zeros, state, 1, cfg)
    assert all(np.array_equal(a.weights[n], new.weights[n]) for n in p.weights)
    with pytest.raises(ValueError):
        adam_step(p, zeros, state, 0, cfg)


def test_non_finite_gradient_reports_groups():
    p = _params()
    grads = {n: np.zeros_like(w) for n, w in p.weights.items()}
    grads["lstm1.Wh"][0, 0, 0] = np.nan
    with pytest.raises(NonFiniteGradient) as info:
        adam_step(p, grads, AdamState.zeros_like(p), 1, TrainConfig())
    assert info.value.bad_groups == ["lstm1.Wh"]


def _tiny_set(n, seed):
    rng = np.random.default_rng(seed)
    vad = []
    for i in range(n):
        v = np.zeros((3, 8), dtype=np.uint8)
        v[: i % 4, 2:6] = 1
        vad.append(v)
    k = np.array([compute_k(v) for v in vad])
    X = rng.uniform(0.1, 1.0, (n, 8, 3)) + k[:, None, None] * np.array([1.0, 0.0, 0.5])
    return FeatureSet(X, vad, k, FeatureKind.STFT)


def test_early_stopping_returns_best(monkeypatch):
    vals = iter([1.0, 2.0, 3.0, 4.0])
    snapshots = []
    monkeypatch.setattr(training, "evaluate_loss", lambda params, *a, **k: next(vals))
    cfg = TrainConfig(max_epochs=10, patience=1, batch_size=4, excerpt_frames=6)
    model_cfg = ModelConfig(3, 6, HeadKind.GAUSSIAN, 3, (2, 2, 2))
    orig_adam = training.adam_step

    def spy(params, *a, **k):
        out = orig_adam(params, *a, **k)
        snapshots.append(out[0].copy())
        return out

    monkeypatch.setattr(training, "adam_step", spy)
    best, log = train(_tiny_set(8, 0), _tiny_set(4, 1), model_cfg, cfg)
    assert log.stopping_epoch == 2 and log.best_epoch == 1
    # two updates per epoch: the returned weights are those after the second update
    assert np.array_equal(best.weights["dense.W"], snapshots[1].weights["dense.W"])
    assert len(snapshots) == 4


def test_training_is_deterministic():
    cfg = TrainConfig(max_epochs=3, patience=3, batch_size=4, seed=5, excerpt_frames=6)
    model_cfg = ModelConfig(3, 6, HeadKind.POISSON, 3, (2, 2, 2))
    runs = [train(_tiny_set(8, 0), _tiny_set(4, 1), model_cfg, cfg, dtype=np.float64) for _ in range(2)]
    assert runs[0][1].to_jsonl(include_time=False) == runs[1][1].to_jsonl(include_time=False)
    assert np.array_equal(runs[0][0].weights["dense.W"], runs[1][0].weights["dense.W"])


def test_train_log_records():
    cfg = TrainConfig(max_epochs=4, patience=2, batch_size=4, excerpt_frames=6)
    model_cfg = ModelConfig(3, 6, HeadKind.CLASSIFICATION, 3, (2, 2, 2))
    _, log = train(_tiny_set(8, 0), _tiny_set(4, 1), model_cfg, cfg)
    lines = [json.loads(l) for l in log.to_jsonl().splitlines()]
    assert len(lines) == len(log.epochs) + 1
    assert {"epoch", "train_loss", "val_loss", "wall_time_s"} <= set(lines[0])
    best = min(log.epochs, key=lambda e: e.val_loss)
    assert log.best_epoch == best.epoch


def test_repeated_batch_loss_drops():
    p = init_params(ModelConfig(3, 6, HeadKind.CLASSIFICATION, 3, (4, 4, 4)), 3)
    fs = _tiny_set(8, 2)
    X, k = fs.features[:, :6], fs.k
    state = AdamState.zeros_like(p)
    cfg = TrainConfig(learning_rate=1e-2)
    first, _ = loss_and_grad(p, X, k)
    for t in range(1, 101):
        value, g = loss_and_grad(p, X, k)
        p, state = adam_step(p, g, state, t, cfg)
    assert value < 0.2 * first
