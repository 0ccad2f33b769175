"""Training-set construction: normalisation, class balancing, excerpts, batches."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dsp import HOP_LENGTH, SAMPLE_RATE, AudioSignal, FeatureKind, TFRepresentation, extract
from .errors import CorpusExhausted, DegenerateInput, FeatureKindMismatch, TooShort
from .mixer import LabeledMixture, SpeakerPool, compute_k, make_negative_sample, synthesize_mixture

STD_FLOOR = 1e-8
NORM_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------


def frame_norm(X):
    """Divide a D x F matrix by the mean Euclidean norm of its frames."""
    data = X.data if isinstance(X, TFRepresentation) else np.asarray(X)
    scale = np.mean(np.linalg.norm(data, axis=1))
    if not scale >= NORM_FLOOR:
        raise DegenerateInput("mean frame norm is zero; cannot normalise")
    out = data / scale
    if isinstance(X, TFRepresentation):
        return TFRepresentation(out, X.feature_kind, X.frame_hop_s, X.frame_len_s)
    return out


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    feature_kind: FeatureKind

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR)
        self.feature_kind = FeatureKind(self.feature_kind)

    def to_json(self) -> dict:
        return {
            "feature_kind": self.feature_kind.value,
            "per_dimension_mean": self.mean.tolist(),
            "per_dimension_std": self.std.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NormalizationStats":
        return cls(obj["per_dimension_mean"], obj["per_dimension_std"], obj["feature_kind"])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "NormalizationStats":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def fit_stats(matrices, feature_kind) -> NormalizationStats:
    """Per-dimension mean and std pooled over every frame of every matrix.

    Accumulated in float64 sums so the result does not depend on how the
    frames are grouped into matrices.
    """
    total = None
    sq = None
    n = 0
    for m in matrices:
        m = np.asarray(m, dtype=np.float64)
        if total is None:
            total = np.zeros(m.shape[1])
            sq = np.zeros(m.shape[1])
        total += m.sum(axis=0)
        sq += (m * m).sum(axis=0)
        n += m.shape[0]
    if not n:
        raise DegenerateInput("no frames to fit normalisation statistics on")
    mean = total / n
    var = np.maximum(sq / n - mean * mean, 0.0)
    return NormalizationStats(mean, np.sqrt(var), feature_kind)


def standardize(X, stats: NormalizationStats, feature_kind=None) -> np.ndarray:
    if isinstance(X, TFRepresentation):
        feature_kind, X = X.feature_kind, X.data
    if feature_kind is not None and FeatureKind(feature_kind) != stats.feature_kind:
        raise FeatureKindMismatch(f"stats are for {stats.feature_kind.value}, input is {FeatureKind(feature_kind).value}")
    return (np.asarray(X) - stats.mean) / stats.std


# ---------------------------------------------------------------------------
# Balanced generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSpec:
    per_class_count: int
    k_max: int
    excerpt_s: float = 5.0
    source_duration_s: float = 10.0
    batch_size: int = 32

    @property
    def n_items(self) -> int:
        return self.per_class_count * (self.k_max + 1)


@dataclass(frozen=True)
class Job:
    target_k: int
    n_speakers: int
    seed: int


def balanced_plan(spec: DatasetSpec, rng) -> list[Job]:
    """Exactly ``per_class_count`` generation jobs for every k in [0, k_max].

    A job for class k mixes L = k speakers; see :func:`realize_job` for the
    rejection loop that guarantees the realised label.
    """
    rng = np.random.default_rng(rng)
    jobs = []
    for k in range(spec.k_max + 1):
        seeds = rng.integers(0, 2**63 - 1, size=spec.per_class_count)
        jobs.extend(Job(k, k, int(s)) for s in seeds)
    return jobs


def realize_job(job: Job, pool: SpeakerPool, noise: list[str], duration_s: float, k_max: int | None = None,
                max_attempts: int = 200) -> tuple[LabeledMixture, int]:
    """Generate a mixture whose label equals ``job.target_k``.

    Returns ``(mixture, seed_used)``; attempts reseed deterministically from
    the job seed until the realised maximum concurrency matches.
    """
    seq = np.random.SeedSequence(job.seed)
    for attempt, child in enumerate(seq.spawn(max_attempts)):
        seed = int(child.generate_state(1, np.uint64)[0])
        if job.target_k == 0:
            mixture = make_negative_sample(noise, duration_s, seed, pool.cache)
        else:
            mixture = synthesize_mixture(pool, job.n_speakers, duration_s, seed, k_max)
        if mixture.k == job.target_k:
            mixture.k_max = k_max
            return mixture, seed
    raise CorpusExhausted(f"could not realise k={job.target_k} in {max_attempts} attempts")


# ---------------------------------------------------------------------------
# Excerpts and batches
# ---------------------------------------------------------------------------


@dataclass
class LabeledSample:
    features: np.ndarray | None
    k: int
    mixture: LabeledMixture | None = None
    offset_frames: int = 0


def random_excerpt(mixture: LabeledMixture, excerpt_s: float, rng) -> LabeledSample:
    """Uniformly placed excerpt with the label recomputed on the cropped VAD.

    Offsets fall on 10 ms frame boundaries so the VAD matrix crops exactly.
    """
    rng = np.random.default_rng(rng)
    n = int(round(excerpt_s * SAMPLE_RATE))
    total = len(mixture.mixture)
    if total < n:
        raise TooShort(f"mixture is {total / SAMPLE_RATE:.2f}s, excerpt needs {excerpt_s:.2f}s")
    max_frame = (total - n) // HOP_LENGTH
    f0 = int(rng.integers(0, max_frame + 1))
    s0 = f0 * HOP_LENGTH
    n_vad = n // HOP_LENGTH
    vad = mixture.per_speaker_vad[:, f0 : f0 + n_vad]
    crop = LabeledMixture(
        AudioSignal(mixture.mixture.samples[s0 : s0 + n], mixture.mixture.sample_rate),
        vad,
        compute_k(vad),
        mixture.k_max,
        mixture.speaker_ids,
    )
    return LabeledSample(None, crop.k, crop, f0)


@dataclass
class FeatureSet:
    """Featurised mixtures held in memory.

    ``features`` is (n, D_full, F); ``vad`` holds each item's L x T VAD matrix
    (T frames at 10 ms, aligned with the feature frames).
    """

    features: np.ndarray
    vad: list[np.ndarray]
    k: np.ndarray
    feature_kind: FeatureKind
    ids: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.k)

    @property
    def n_frames(self) -> int:
        return self.features.shape[1]


def featurize_mixtures(mixtures: list[LabeledMixture], kind, dtype=np.float32) -> FeatureSet:
    kind = FeatureKind(kind)
    feats = np.stack([extract(m.mixture, kind).data for m in mixtures]).astype(dtype)
    return FeatureSet(feats, [m.per_speaker_vad for m in mixtures], np.array([m.k for m in mixtures]), kind,
                      list(range(len(mixtures))))


def excerpt_features(fs: FeatureSet, index: int, n_frames: int, rng) -> tuple[np.ndarray, int, int]:
    """Random ``n_frames`` crop of item ``index``: (features, k, offset)."""
    total = fs.n_frames
    if total < n_frames:
        raise TooShort(f"item has {total} frames, excerpt needs {n_frames}")
    f0 = int(rng.integers(0, total - n_frames + 1))
    vad = fs.vad[index][:, f0 : f0 + n_frames]
    return fs.features[index, f0 : f0 + n_frames], compute_k(vad), f0


def prepare_input(X: np.ndarray, stats: NormalizationStats | None) -> np.ndarray:
    """Frame normalisation followed by per-dimension standardisation."""
    X = frame_norm(X)
    if stats is not None:
        X = (X - stats.mean) / stats.std
    return X


@dataclass
class Batch:
    X: np.ndarray
    k: np.ndarray
    indices: np.ndarray
    offsets: np.ndarray


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def make_batches(fs: FeatureSet, batch_size: int, rng, n_frames: int | None = None,
                 stats: NormalizationStats | None = None, shuffle: bool = True, dtype=np.float32):
    """One epoch of mini-batches.

    Sample order is reshuffled and excerpt offsets are redrawn from ``rng``
    every call; the final short batch is kept.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(rng)
    n_frames = fs.n_frames if n_frames is None else n_frames
    order = rng.permutation(len(fs)) if shuffle else np.arange(len(fs))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        xs, ks, offs = [], [], []
        for i in idx:
            x, k, f0 = excerpt_features(fs, int(i), n_frames, rng)
            xs.append(prepare_input(x, stats))
            ks.append(k)
            offs.append(f0)
        yield Batch(np.stack(xs).astype(dtype), np.array(ks), idx, np.array(offs))


def fit_stats_on_set(fs: FeatureSet) -> NormalizationStats:
    """Statistics of frame-normalised training features (full-length items)."""
    return fit_stats((frame_norm(x) for x in fs.features), fs.feature_kind)
