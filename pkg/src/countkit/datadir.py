"""On-disk layouts for mixture datasets and featurised sets.

Mixture dataset::

    audio/NNNNN.wav     16 kHz mixtures
    vad/NNNNN.bin       per-speaker VAD matrices (packed bits)
    labels.jsonl        {"id", "k", "L", "seed"} per line

Feature directory::

    features.ctk        (n, D, F) float32 tensor; header carries feature_kind
    vad/NNNNN.bin       copied from the mixture dataset
    labels.jsonl        copied from the mixture dataset
"""

from __future__ import annotations

import json
import os
import shutil

import numpy as np

from .dataset import FeatureSet
from .dsp import FRAME_LENGTH, HOP_LENGTH, SAMPLE_RATE, FeatureKind, read_wav, write_wav
from .errors import ParseError, ShapeMismatch
from .mixer import LabeledMixture
from .tensorio import pack_bits, read_tensor, unpack_bits, write_tensor

LABELS = "labels.jsonl"
FEATURES = "features.ctk"


def item_name(i: int) -> str:
    return f"{i:05d}"


def write_mixture(out_dir, i: int, mixture: LabeledMixture, seed: int) -> dict:
    name = item_name(i)
    write_wav(os.path.join(out_dir, "audio", name + ".wav"), mixture.mixture)
    with open(os.path.join(out_dir, "vad", name + ".bin"), "wb") as fh:
        fh.write(pack_bits(mixture.per_speaker_vad))
    return {"id": name, "k": int(mixture.k), "L": int(mixture.n_speakers), "seed": int(seed)}


def write_labels(out_dir, records: list[dict]) -> None:
    with open(os.path.join(out_dir, LABELS), "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def prepare_mixture_dir(out_dir) -> None:
    os.makedirs(os.path.join(out_dir, "audio"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "vad"), exist_ok=True)


def read_labels(data_dir) -> list[dict]:
    path = os.path.join(data_dir, LABELS)
    if not os.path.exists(path):
        raise ParseError(f"{data_dir} has no {LABELS}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                records.append({"id": str(rec["id"]), "k": int(rec["k"]), "L": int(rec["L"]), "seed": rec.get("seed")})
            except (ValueError, KeyError) as exc:
                raise ParseError(f"{path}:{n}: bad label record ({exc})") from None
    return records


def read_vad(data_dir, item_id: str) -> np.ndarray:
    with open(os.path.join(data_dir, "vad", item_id + ".bin"), "rb") as fh:
        return unpack_bits(fh.read())


def read_mixtures(data_dir):
    """Yield ``(record, LabeledMixture)`` for every item in a mixture dataset."""
    for rec in read_labels(data_dir):
        audio = read_wav(os.path.join(data_dir, "audio", rec["id"] + ".wav"))
        vad = read_vad(data_dir, rec["id"])
        yield rec, LabeledMixture(audio, vad, rec["k"])


def write_feature_dir(out_dir, features: np.ndarray, kind: FeatureKind, source_dir, stats_file: str | None = None) -> None:
    os.makedirs(os.path.join(out_dir, "vad"), exist_ok=True)
    write_tensor(os.path.join(out_dir, FEATURES), features, "f32", feature_kind=FeatureKind(kind).value,
                 hop=HOP_LENGTH / SAMPLE_RATE, frame_len=FRAME_LENGTH / SAMPLE_RATE, stats_file=stats_file)
    shutil.copyfile(os.path.join(source_dir, LABELS), os.path.join(out_dir, LABELS))
    for rec in read_labels(source_dir):
        name = rec["id"] + ".bin"
        shutil.copyfile(os.path.join(source_dir, "vad", name), os.path.join(out_dir, "vad", name))


def read_feature_dir(data_dir) -> tuple[FeatureSet, dict]:
    X, header = read_tensor(os.path.join(data_dir, FEATURES))
    records = read_labels(data_dir)
    if len(records) != X.shape[0]:
        raise ShapeMismatch(f"{data_dir}: {X.shape[0]} feature items but {len(records)} labels")
    vad = [read_vad(data_dir, r["id"]) for r in records]
    fs = FeatureSet(X, vad, np.array([r["k"] for r in records]), FeatureKind(header["feature_kind"]),
                    [r["id"] for r in records])
    return fs, header

