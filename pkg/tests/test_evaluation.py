import csv

import numpy as np
import pytest

from countkit.errors import EmptyInput, LabelOutOfRange, ShapeMismatch
from countkit.evaluation import (
    aggregate_runs,
    evaluate,
    lloyd,
    mel_mean_feature,
    vq_fit,
    vq_predict,
    vq_predict_batch,
    VqBaseline,
)


def test_perfect_predictions():
    r = evaluate([(k, k) for k in range(4) for _ in range(5)], 3)
    assert r.overall_mae == 0.0
    assert np.array_equal(r.per_k_mae, np.zeros(4))
    assert np.array_equal(r.confusion, np.eye(4))


def test_off_by_one():
    r = evaluate([(k, k + 1) for k in range(4) for _ in range(3)], 3)
    assert r.overall_mae == 1.0
    # the k_max + 1 estimates fold into the last column
    assert r.confusion[3, 3] == 1.0


def test_mean_estimator_balanced():
    r = evaluate([(k, 5) for k in range(11) for _ in range(7)], 10)
    assert r.overall_mae == pytest.approx(30 / 11, abs=1e-12)
    assert np.allclose(r.confusion.sum(axis=1), 1.0, atol=1e-9)


def test_ci_and_weighted_mean():
    rng = np.random.default_rng(0)
    k = rng.integers(0, 4, 200)
    k_hat = k + rng.integers(-1, 2, 200)
    r = evaluate(zip(k, k_hat), 3)
    err = np.abs(k_hat - k)
    for c in range(4):
        e = err[k == c]
        assert r.per_k_mae[c] == pytest.approx(e.mean())
        assert r.ci95[c] == pytest.approx(1.96 * e.std(ddof=1) / np.sqrt(len(e)))
    assert r.overall_mae == pytest.approx(np.sum(r.per_k_mae * r.n_per_k) / r.n_per_k.sum())
    perm = rng.permutation(200)
    assert evaluate(zip(k[perm], k_hat[perm]), 3).overall_mae == r.overall_mae


def test_absent_class_and_errors():
    r = evaluate([(0, 0), (2, 1)], 3)
    assert np.isnan(r.per_k_mae[1]) and not r.confusion[1].any()
    assert r.to_json()["per_k_mae"][1] is None
    with pytest.raises(EmptyInput):
        evaluate([], 3)
    with pytest.raises(LabelOutOfRange):
        evaluate([(4, 0)], 3)


def test_aggregate():
    a = evaluate([(0, 0), (1, 2), (2, 2), (3, 1)], 3)
    b = evaluate([(0, 1), (1, 1), (2, 0), (3, 3)], 3)
    assert aggregate_runs([a]) is a
    same = aggregate_runs([a, a])
    assert np.array_equal(same.per_k_mae, a.per_k_mae) and same.overall_mae == a.overall_mae
    avg = aggregate_runs([a, b])
    assert np.allclose(avg.per_k_mae, [0.5, 0.5, 1.0, 1.0])
    assert np.allclose(avg.confusion, (a.confusion + b.confusion) / 2)
    with pytest.raises(ShapeMismatch):
        aggregate_runs([a, evaluate([(0, 0)], 4)])
    with pytest.raises(EmptyInput):
        aggregate_runs([])


def test_csv_output(tmp_path):
    r = evaluate([(k, min(k + 1, 3)) for k in range(4)], 3)
    r.write_csv(tmp_path, prefix="x_")
    rows = list(csv.reader(open(tmp_path / "x_per_k_mae.csv")))
    assert rows[0] == ["k", "n", "mae", "ci95"] and len(rows) == 5
    conf = np.array(list(csv.reader(open(tmp_path / "x_confusion.csv"))), dtype=float)
    assert conf.shape == (4, 4) and np.allclose(conf, r.confusion)


def _separable(n_per=10, k_max=10, seed=0):
    rng = np.random.default_rng(seed)
    centres = np.arange(k_max + 1)[:, None] * 10.0 * np.ones((1, 4))
    X = np.concatenate([c + rng.normal(0, 0.1, (n_per, 4)) for c in centres])
    y = np.repeat(np.arange(k_max + 1), n_per)
    return X, y


def test_vq_separable():
    X, y = _separable()
    vq = vq_fit(X, y, 10, 0)
    assert len(vq.codebook) == 11
    assert np.array_equal(vq_predict_batch(vq, X), y)
    assert vq_predict(vq, vq.codebook[3]) == vq.labels[3]


def test_vq_duplicate_data():
    X = np.ones((12, 3))
    y = np.array([0, 1, 2, 3] * 3)
    np.put(y, [0, 4], 3)  # mean 1.83 -> 2
    vq = vq_fit(X, y, 3, 1)
    assert vq_predict(vq, np.ones(3)) == 2
    with pytest.raises(EmptyInput):
        vq_fit(X[:3], y[:3], 3, 0)


def test_vq_tie_goes_to_lower_index():
    vq = VqBaseline(np.array([[0.0], [2.0]]), np.array([5, 7]), 0.0)
    assert vq_predict(vq, [1.0]) == 5


def test_lloyd_objective_non_increasing():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(300, 5))
    for seed in range(5):
        _, idx, hist = lloyd(X, 6, np.random.default_rng(seed))
        assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))
        assert len(np.unique(idx)) == 6


def test_mel_mean_feature_is_gain_invariant():
    rng = np.random.default_rng(0)
    mel = rng.uniform(0.1, 1, (50, 40))
    assert np.allclose(mel_mean_feature(mel), mel_mean_feature(3.0 * mel))
    assert mel_mean_feature(mel).shape == (40,)
