"""Count-estimate evaluation and the vector-quantiser baseline."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .dataset import frame_norm
from .decision import round_half_away
from .errors import EmptyInput, LabelOutOfRange, ShapeMismatch

CI_Z = 1.96


@dataclass
class EvalReport:
    k_max: int
    per_k_mae: np.ndarray  # NaN for classes without samples
    ci95: np.ndarray
    n_per_k: np.ndarray
    overall_mae: float
    overall_std: float
    confusion: np.ndarray  # rows: true k, cols: estimate; row-normalised

    def to_json(self) -> dict:
        def clean(a):
            return [None if not np.isfinite(v) else float(v) for v in np.asarray(a, dtype=float)]

        return {
            "k_max": self.k_max,
            "overall_mae": float(self.overall_mae),
            "overall_std": float(self.overall_std),
            "per_k_mae": clean(self.per_k_mae),
            "ci95": clean(self.ci95),
            "n_per_k": [float(v) if v != int(v) else int(v) for v in self.n_per_k],
            "confusion": [[float(v) for v in row] for row in self.confusion],
        }

    def write_csv(self, out_dir, prefix: str = "") -> None:
        """Per-k MAE table and the row-major confusion matrix."""
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, f"{prefix}per_k_mae.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "n", "mae", "ci95"])
            for k in range(self.k_max + 1):
                w.writerow([k, self.n_per_k[k], _fmt(self.per_k_mae[k]), _fmt(self.ci95[k])])
        with open(os.path.join(out_dir, f"{prefix}confusion.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            for row in self.confusion:
                w.writerow([_fmt(v) for v in row])


def _fmt(v) -> str:
    return "" if not np.isfinite(v) else repr(float(v))


def evaluate(predictions, k_max: int) -> EvalReport:
    """Summarise ``(k, k_hat)`` pairs.

    Estimates above ``k_max`` count in full towards the MAE but land in the
    last confusion column.
    """
    pairs = np.asarray(list(predictions), dtype=int).reshape(-1, 2)
    if len(pairs) == 0:
        raise EmptyInput("no predictions to evaluate")
    k, k_hat = pairs[:, 0], pairs[:, 1]
    if np.any(k < 0) or np.any(k > k_max):
        raise LabelOutOfRange(f"true counts must lie in [0, {k_max}]")
    err = np.abs(k_hat - k).astype(float)
    n_k = np.bincount(k, minlength=k_max + 1)
    per_k = np.full(k_max + 1, np.nan)
    ci = np.full(k_max + 1, np.nan)
    confusion = np.zeros((k_max + 1, k_max + 1))
    cols = np.clip(k_hat, 0, k_max)
    for c in range(k_max + 1):
        sel = k == c
        if not sel.any():
            continue
        e = err[sel]
        per_k[c] = e.mean()
        ci[c] = CI_Z * e.std(ddof=1) / np.sqrt(len(e)) if len(e) > 1 else 0.0
        confusion[c] = np.bincount(cols[sel], minlength=k_max + 1) / sel.sum()
    return EvalReport(k_max, per_k, ci, n_k, float(err.mean()), float(err.std()), confusion)


def aggregate_runs(reports: list[EvalReport]) -> EvalReport:
    """Element-wise mean over repeated runs (e.g. training seeds)."""
    if not reports:
        raise EmptyInput("no reports to aggregate")
    k_max = reports[0].k_max
    if any(r.k_max != k_max for r in reports):
        raise ShapeMismatch("reports disagree on k_max")
    if len(reports) == 1:
        return reports[0]

    def mean(attr):
        return np.mean([getattr(r, attr) for r in reports], axis=0)

    return EvalReport(
        k_max,
        mean("per_k_mae"),
        mean("ci95"),
        mean("n_per_k"),
        float(mean("overall_mae")),
        float(mean("overall_std")),
        mean("confusion"),
    )


# ---------------------------------------------------------------------------
# Vector-quantiser baseline
# ---------------------------------------------------------------------------


@dataclass
class VqBaseline:
    codebook: np.ndarray  # (k_max + 1, dim)
    labels: np.ndarray  # count assigned to each centroid
    sse: float

    def predict(self, feature) -> int:
        return vq_predict(self, feature)


def _assign(X: np.ndarray, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
    idx = np.argmin(d2, axis=1)  # ties go to the lowest centroid index
    return idx, d2[np.arange(len(X)), idx]


def kmeans_pp(X: np.ndarray, n_clusters: int, rng: np.random.Generator) -> np.ndarray:
    """D^2-weighted seeding; falls back to uniform draws once every point is covered."""
    C = np.empty((n_clusters, X.shape[1]))
    C[0] = X[rng.integers(len(X))]
    d2 = ((X - C[0]) ** 2).sum(axis=1)
    for c in range(1, n_clusters):
        total = d2.sum()
        i = rng.choice(len(X), p=d2 / total) if total > 0 else rng.integers(len(X))
        C[c] = X[i]
        d2 = np.minimum(d2, ((X - C[c]) ** 2).sum(axis=1))
    return C


def lloyd(X: np.ndarray, n_clusters: int, rng: np.random.Generator, max_iter: int = 100, tol: float = 0.0):
    """Lloyd's k-means with k-means++ seeding.

    Empty clusters are re-seeded at the point currently farthest from its
    centroid. Returns ``(centroids, assignment, sse_history)``; the history
    holds the objective after every assignment step.
    """
    X = np.asarray(X, dtype=np.float64)
    C = kmeans_pp(X, n_clusters, rng)
    history = []
    idx, d = _assign(X, C)
    history.append(float(d.sum()))
    for _ in range(max_iter):
        for c in range(n_clusters):
            members = idx == c
            if members.any():
                C[c] = X[members].mean(axis=0)
            else:
                far = int(np.argmax(d))
                if d[far] > 0.0:
                    C[c] = X[far]
                    d[far] = 0.0
        new_idx, d = _assign(X, C)
        history.append(float(d.sum()))
        if np.array_equal(new_idx, idx) or history[-2] - history[-1] <= tol * history[-2]:
            idx = new_idx
            break
        idx = new_idx
    return C, idx, history


def vq_fit(features, labels, k_max: int, rng, restarts: int = 10) -> VqBaseline:
    """Fit ``k_max + 1`` centroids; each is labelled with the rounded mean count of its members."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=float)
    n_clusters = k_max + 1
    if len(X) < n_clusters:
        raise EmptyInput(f"need at least {n_clusters} training points, got {len(X)}")
    rng = np.random.default_rng(rng)
    best = None
    for _ in range(restarts):
        C, idx, hist = lloyd(X, n_clusters, rng)
        if best is None or hist[-1] < best[2]:
            best = (C, idx, hist[-1])
    C, idx, sse = best
    fallback = round_half_away(float(y.mean()))
    mapping = np.array(
        [round_half_away(float(y[idx == c].mean())) if np.any(idx == c) else fallback for c in range(n_clusters)]
    )
    return VqBaseline(C, mapping, float(sse))


def vq_predict(baseline: VqBaseline, feature) -> int:
    x = np.asarray(feature, dtype=np.float64)[None, :]
    idx, _ = _assign(x, baseline.codebook)
    return int(baseline.labels[idx[0]])


def vq_predict_batch(baseline: VqBaseline, features) -> np.ndarray:
    idx, _ = _assign(np.asarray(features, dtype=np.float64), baseline.codebook)
    return baseline.labels[idx]


def mel_mean_feature(mel: np.ndarray) -> np.ndarray:
    """Temporally averaged (frame-normalised) mel filter outputs."""
    return frame_norm(np.asarray(mel, dtype=np.float64)).mean(axis=0)
