"""Desk-scale end-to-end experiment on the synthetic corpus.

Generates a toy corpus, builds balanced train/validation/test sets from
disjoint speakers, trains every head for several seeds, and compares the
network against the VQ baseline and the constant mean estimator.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass

import numpy as np

from .dataset import (
    DatasetSpec,
    FeatureSet,
    balanced_plan,
    excerpt_features,
    featurize_mixtures,
    fit_stats_on_set,
    prepare_input,
    realize_job,
)
from .corpus import toy_corpus
from .decision import decide_batch
from .dsp import FeatureKind
from .evaluation import aggregate_runs, evaluate, mel_mean_feature, vq_fit, vq_predict_batch
from .mixer import load_manifest
from .model import HeadKind, ModelConfig, predict_batch, save_checkpoint
from .training import TrainConfig, train

log = logging.getLogger(__name__)

# named sub-streams of the master seed; order is part of the format
STREAMS = ("corpus", "train_mix", "val_mix", "test_mix", "training", "vq")


@dataclass
class ExperimentConfig:
    seed: int = 7
    n_speakers: int = 30
    split: tuple[int, int, int] = (18, 6, 6)
    k_max: int = 3
    n_train: int = 400
    n_val: int = 100
    n_test: int = 100
    train_duration_s: float = 10.0
    excerpt_s: float = 5.0
    feature_kind: str = "stft"
    heads: tuple[str, ...] = ("classification", "gauss", "poisson")
    n_seeds: int = 3
    max_epochs: int = 20
    patience: int = 4
    learning_rate: float = 1e-3
    batch_size: int = 32
    vq_restarts: int = 10

    def __post_init__(self):
        self.split = tuple(int(v) for v in self.split)
        self.heads = tuple(HeadKind(h).value for h in self.heads)
        if sum(self.split) > self.n_speakers:
            raise ValueError("speaker split exceeds n_speakers")
        per_class = self.k_max + 1
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) % per_class:
                raise ValueError(f"{name} must be a multiple of k_max + 1 for balanced classes")
        if self.split[1] < self.k_max or self.split[2] < self.k_max or self.split[0] < self.k_max:
            raise ValueError("every split needs at least k_max speakers")


def stream_seeds(seed: int) -> dict[str, int]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: int(c.generate_state(1, np.uint32)[0]) for name, c in zip(STREAMS, children)}


def build_set(pool, noise, n_items: int, k_max: int, duration_s: float, seed: int):
    spec = DatasetSpec(n_items // (k_max + 1), k_max, source_duration_s=duration_s)
    return [realize_job(job, pool, noise, duration_s, k_max)[0] for job in balanced_plan(spec, seed)]


def _predict(params, fs: FeatureSet, stats, batch_size: int) -> np.ndarray:
    X = np.stack([prepare_input(x, stats) for x in fs.features]).astype(params.dtype)
    out = [predict_batch(params, X[i : i + batch_size]) for i in range(0, len(X), batch_size)]
    return np.concatenate(out)


def _vq_train_features(mel: FeatureSet, n_frames: int, seed: int):
    """One random excerpt per training item, labelled on the cropped VAD."""
    rng = np.random.default_rng(seed)
    feats, labels = [], []
    for i in range(len(mel)):
        x, k, _ = excerpt_features(mel, i, n_frames, rng)
        feats.append(mel_mean_feature(x))
        labels.append(k)
    return np.array(feats), np.array(labels)


def run_experiment(out_dir, config: ExperimentConfig | None = None) -> dict:
    """Run the full pipeline; writes artifacts under ``out_dir`` and returns the report."""
    config = config or ExperimentConfig()
    os.makedirs(out_dir, exist_ok=True)
    seeds = stream_seeds(config.seed)

    manifest_path = toy_corpus(os.path.join(out_dir, "corpus"), config.n_speakers, seeds["corpus"])
    pool, noise = load_manifest(manifest_path)
    ids = [s.speaker_id for s in pool.speakers]
    a, b, c = config.split
    pools = pool.subset(ids[:a]), pool.subset(ids[a : a + b]), pool.subset(ids[a + b : a + b + c])

    log.info("synthesising mixtures")
    train_mix = build_set(pools[0], noise, config.n_train, config.k_max, config.train_duration_s, seeds["train_mix"])
    # evaluation items are generated at excerpt length so the classes stay exactly balanced
    val_mix = build_set(pools[1], noise, config.n_val, config.k_max, config.excerpt_s, seeds["val_mix"])
    test_mix = build_set(pools[2], noise, config.n_test, config.k_max, config.excerpt_s, seeds["test_mix"])

    kind = FeatureKind(config.feature_kind)
    train_fs = featurize_mixtures(train_mix, kind)
    val_fs = featurize_mixtures(val_mix, kind)
    test_fs = featurize_mixtures(test_mix, kind)
    stats = fit_stats_on_set(train_fs)
    n_frames = test_fs.n_frames

    run_seeds = [int(s) for s in np.random.default_rng(seeds["training"]).integers(0, 2**31 - 1, config.n_seeds)]
    heads = {}
    for head in config.heads:
        model_cfg = ModelConfig(train_fs.features.shape[2], n_frames, HeadKind(head), config.k_max)
        reports, runs = [], []
        for r, run_seed in enumerate(run_seeds):
            log.info("training %s head, seed %d/%d", head, r + 1, len(run_seeds))
            tc = TrainConfig(
                learning_rate=config.learning_rate,
                max_epochs=config.max_epochs,
                patience=config.patience,
                batch_size=config.batch_size,
                seed=run_seed,
                excerpt_frames=n_frames,
            )
            params, train_log = train(train_fs, val_fs, model_cfg, tc, stats)
            params.feature_kind = kind.value
            run_dir = os.path.join(out_dir, "runs", f"{head}_{r}")
            save_checkpoint(run_dir, params)
            with open(os.path.join(run_dir, "train_log.jsonl"), "w", encoding="utf-8") as fh:
                fh.write(train_log.to_jsonl())
            k_hat = decide_batch(HeadKind(head), _predict(params, test_fs, stats, config.batch_size))
            report = evaluate(zip(test_fs.k, k_hat), config.k_max)
            reports.append(report)
            runs.append({
                "seed": run_seed,
                "overall_mae": report.overall_mae,
                "best_epoch": train_log.best_epoch,
                "stopping_epoch": train_log.stopping_epoch,
                "best_val_loss": train_log.best_val_loss,
            })
        agg = aggregate_runs(reports)
        agg.write_csv(out_dir, prefix=f"{head}_")
        heads[head] = {"aggregate": agg.to_json(), "runs": runs}

    log.info("fitting VQ baseline")
    mel_train = featurize_mixtures(train_mix, FeatureKind.MEL40)
    mel_test = featurize_mixtures(test_mix, FeatureKind.MEL40)
    vq_x, vq_y = _vq_train_features(mel_train, n_frames, seeds["vq"])
    vq = vq_fit(vq_x, vq_y, config.k_max, seeds["vq"], restarts=config.vq_restarts)
    vq_pred = vq_predict_batch(vq, np.array([mel_mean_feature(x) for x in mel_test.features]))
    vq_report = evaluate(zip(test_fs.k, vq_pred), config.k_max)

    mean_k = config.k_max // 2
    mean_report = evaluate(((k, mean_k) for k in test_fs.k), config.k_max)

    report = {
        "config": asdict(config),
        "stream_seeds": seeds,
        "test_counts": np.bincount(test_fs.k, minlength=config.k_max + 1).tolist(),
        "heads": heads,
        "vq_baseline": vq_report.to_json(),
        "mean_estimator": {"k_hat": mean_k, **mean_report.to_json()},
    }
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return report
