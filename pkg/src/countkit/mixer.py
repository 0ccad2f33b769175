"""Labelled multi-speaker mixture synthesis.

A mixture is built from ``L`` distinct speakers. Each speaker contributes a
track of concatenated, silence-trimmed utterances; tracks are brought to equal
active-region RMS (0 dB SNR between every pair of sources), summed and peak
normalised. The label ``k`` is the maximum, over 10 ms frames, of the number
of simultaneously active speakers.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .dsp import HOP_LENGTH, SAMPLE_RATE, AudioSignal, read_wav
from .errors import AllSilent, CorpusExhausted, EmptyTrackList, LengthMismatch
from .vad import DEFAULT_HANGOVER, DEFAULT_THRESHOLD_DB, VadTrack, energy_vad, trim_silence

PEAK_LEVEL = 0.99


def compute_k(vad_matrix) -> int:
    """Maximum number of concurrently active rows over all frames."""
    v = np.asarray(vad_matrix)
    if v.size == 0:
        return 0
    return int(v.sum(axis=0).max())


@dataclass
class Speaker:
    speaker_id: str
    utterances: list[str]


class UtteranceCache:
    """Loads utterances once and keeps their trimmed audio and VAD track."""

    def __init__(self, threshold_db: float = DEFAULT_THRESHOLD_DB, hangover_frames: int = DEFAULT_HANGOVER):
        self.threshold_db = threshold_db
        self.hangover_frames = hangover_frames
        self._trimmed: dict[str, tuple[AudioSignal, VadTrack] | None] = {}
        self._raw: dict[str, AudioSignal] = {}

    def raw(self, path: str) -> AudioSignal:
        if path not in self._raw:
            self._raw[path] = read_wav(path)
        return self._raw[path]

    def trimmed(self, path: str) -> tuple[AudioSignal, VadTrack] | None:
        """Trimmed ``(audio, vad)``, or None when the utterance is all silence."""
        if path not in self._trimmed:
            sig = self.raw(path)
            track = energy_vad(sig, self.threshold_db, self.hangover_frames)
            try:
                sig, track = trim_silence(sig, track)
            except AllSilent:
                self._trimmed[path] = None
                return None
            # keep whole frames only so concatenated audio stays frame aligned
            n = len(track) * HOP_LENGTH
            self._trimmed[path] = (AudioSignal(sig.samples[:n]), track)
        return self._trimmed[path]


@dataclass
class SpeakerPool:
    speakers: list[Speaker]
    root: str = "."
    cache: UtteranceCache = field(default_factory=UtteranceCache)

    def __post_init__(self):
        ids = [s.speaker_id for s in self.speakers]
        if len(set(ids)) != len(ids):
            raise ValueError("speaker ids must be unique")
        for s in self.speakers:
            if not s.utterances:
                raise ValueError(f"speaker {s.speaker_id} has no utterances")

    def __len__(self) -> int:
        return len(self.speakers)

    def subset(self, ids) -> "SpeakerPool":
        wanted = set(ids)
        return SpeakerPool([s for s in self.speakers if s.speaker_id in wanted], self.root, self.cache)


def load_manifest(path, cache: UtteranceCache | None = None) -> tuple[SpeakerPool, list[str]]:
    """Read a corpus manifest.

    The manifest is a JSON object mapping speaker id to a list of WAV paths.
    The optional reserved key ``"_noise"`` lists non-speech files used for
    ``k = 0`` examples. Relative paths resolve against the manifest directory.
    """
    root = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(root, p)

    noise = [resolve(p) for p in raw.pop("_noise", [])]
    speakers = [Speaker(sid, [resolve(p) for p in paths]) for sid, paths in sorted(raw.items())]
    return SpeakerPool(speakers, root, cache or UtteranceCache()), noise


@dataclass
class LabeledMixture:
    mixture: AudioSignal
    per_speaker_vad: np.ndarray
    k: int
    k_max: int | None = None
    speaker_ids: list[str] = field(default_factory=list)

    @property
    def n_speakers(self) -> int:
        return self.per_speaker_vad.shape[0]


def build_speaker_track(speaker: Speaker, target_duration_s: float, rng_seed, cache: UtteranceCache | None = None,
                        allow_repeat: bool = True) -> tuple[AudioSignal, VadTrack]:
    """Concatenate trimmed utterances of one speaker up to an exact duration.

    Utterances are visited in random order; once every one has been used,
    further passes repeat them (with ``allow_repeat``).
    """
    if target_duration_s <= 0:
        raise ValueError("target duration must be positive")
    cache = cache or UtteranceCache()
    rng = np.random.default_rng(rng_seed)
    n_target = int(round(target_duration_s * SAMPLE_RATE))
    usable = [p for p in speaker.utterances if cache.trimmed(p) is not None]
    if not usable:
        raise CorpusExhausted(f"speaker {speaker.speaker_id} has no non-silent utterance")

    audio, tracks, total = [], [], 0
    while total < n_target:
        order = rng.permutation(len(usable))
        for i in order:
            sig, track = cache.trimmed(usable[i])
            audio.append(sig.samples)
            tracks.append(track.activity)
            total += len(sig)
            if total >= n_target:
                break
        if total < n_target and not allow_repeat:
            raise CorpusExhausted(
                f"speaker {speaker.speaker_id} has {total / SAMPLE_RATE:.2f}s of speech, "
                f"{target_duration_s:.2f}s requested"
            )
    samples = np.concatenate(audio)[:n_target]
    activity = np.concatenate(tracks)[: n_target // HOP_LENGTH]
    return AudioSignal(samples), VadTrack(activity)


def active_rms(signal: AudioSignal, track: VadTrack) -> float:
    mask = np.repeat(track.activity.astype(bool), HOP_LENGTH)
    active = signal.samples[: len(mask)][mask[: len(signal)]]
    if active.size == 0:
        return float(np.sqrt(np.mean(signal.samples**2))) if len(signal) else 0.0
    return float(np.sqrt(np.mean(active**2)))


def peak_normalize(samples: np.ndarray, level: float = PEAK_LEVEL) -> np.ndarray:
    peak = np.max(np.abs(samples)) if samples.size else 0.0
    if peak <= 0.0:
        return samples.copy()
    return samples * (level / peak)


def equalize(tracks: list[tuple[AudioSignal, VadTrack]]) -> list[np.ndarray]:
    """Scale every track to the first track's active-region RMS."""
    ref = active_rms(*tracks[0])
    out = []
    for sig, track in tracks:
        rms = active_rms(sig, track)
        gain = ref / rms if rms > 0.0 and ref > 0.0 else 1.0
        out.append(sig.samples * gain)
    return out


def mix(tracks: list[tuple[AudioSignal, VadTrack]], k_max: int | None = None,
        speaker_ids: list[str] | None = None) -> LabeledMixture:
    if not tracks:
        raise EmptyTrackList("mix needs at least one track")
    n = len(tracks[0][0])
    rate = tracks[0][0].sample_rate
    for sig, track in tracks:
        if len(sig) != n or len(track) != len(tracks[0][1]):
            raise LengthMismatch("all tracks must have equal length")
        if sig.sample_rate != rate:
            raise LengthMismatch("all tracks must share one sample rate")
    scaled = equalize(tracks)
    mixture = peak_normalize(np.sum(scaled, axis=0))
    vad = np.stack([t.activity for _, t in tracks]).astype(np.uint8)
    return LabeledMixture(AudioSignal(mixture, rate), vad, compute_k(vad), k_max, list(speaker_ids or []))


def synthesize_mixture(pool: SpeakerPool, n_speakers: int, duration_s: float, rng_seed,
                       k_max: int | None = None) -> LabeledMixture:
    """Draw ``n_speakers`` distinct speakers from ``pool`` and mix them."""
    if n_speakers > len(pool):
        raise CorpusExhausted(f"need {n_speakers} speakers, pool has {len(pool)}")
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(len(pool), size=n_speakers, replace=False)
    seeds = rng.integers(0, 2**63 - 1, size=n_speakers)
    tracks = [
        build_speaker_track(pool.speakers[i], duration_s, int(s), pool.cache) for i, s in zip(chosen, seeds)
    ]
    ids = [pool.speakers[i].speaker_id for i in chosen]
    return mix(tracks, k_max, ids)


def make_negative_sample(noise_corpus: list[str], duration_s: float, rng_seed,
                         cache: UtteranceCache | None = None, max_attempts: int = 20) -> LabeledMixture:
    """A ``k = 0`` example cut from a non-speech recording."""
    if not noise_corpus:
        raise CorpusExhausted("noise corpus is empty")
    cache = cache or UtteranceCache()
    rng = np.random.default_rng(rng_seed)
    n = int(round(duration_s * SAMPLE_RATE))
    for _ in range(max_attempts):
        sig = cache.raw(noise_corpus[int(rng.integers(len(noise_corpus)))])
        samples = sig.samples
        if len(samples) == 0:
            continue
        if len(samples) < n:
            samples = np.tile(samples, -(-n // len(samples)))
        start = int(rng.integers(0, len(samples) - n + 1))
        excerpt = samples[start : start + n]
        if np.max(np.abs(excerpt)) > 0.0:
            vad = np.zeros((0, n // HOP_LENGTH), dtype=np.uint8)
            return LabeledMixture(AudioSignal(peak_normalize(excerpt)), vad, 0)
    raise CorpusExhausted("noise corpus yielded only silent excerpts")
