"""Synthetic speech-like and noise corpora for corpus-free experiments.

A synthetic "speaker" is a harmonic tone complex with a speaker-specific
pitch and passband, amplitude modulated at a syllabic rate and gated on and off like
running speech. Noise recordings are broadband coloured noise with a slow
level drift and no gating.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .dsp import SAMPLE_RATE, AudioSignal, write_wav

F0_LOW_HZ = 100.0
F0_HIGH_HZ = 320.0
HARMONIC_CEILING_HZ = 6000.0
EDGE_TAPER_HZ = 300.0
FLOOR_AMPLITUDE = 1e-4
RAMP_S = 0.01


@dataclass
class SyntheticSpeaker:
    speaker_id: str
    f0_hz: float
    am_rate_hz: float
    mean_on_s: float
    mean_off_s: float
    band_low_hz: float = 0.0
    band_high_hz: float = HARMONIC_CEILING_HZ


def gate(n: int, mean_on_s: float, mean_off_s: float, rng: np.random.Generator) -> np.ndarray:
    """On/off envelope with exponentially distributed run lengths and short ramps."""
    env = np.zeros(n)
    pos, on = 0, True
    while pos < n:
        mean = mean_on_s if on else mean_off_s
        length = max(int((0.1 + rng.exponential(mean)) * SAMPLE_RATE), 1)
        if on:
            env[pos : pos + length] = 1.0
        pos += length
        on = not on
    ramp = int(RAMP_S * SAMPLE_RATE)
    kernel = np.hanning(2 * ramp + 1)
    return np.convolve(env, kernel / kernel.sum(), mode="same")


def passband_gain(freqs, lo_hz: float, hi_hz: float) -> np.ndarray:
    """Unit gain inside ``[lo_hz, hi_hz]`` with raised-cosine skirts ``EDGE_TAPER_HZ`` wide."""
    freqs = np.asarray(freqs, dtype=float)
    outside = np.maximum(lo_hz - freqs, 0.0) + np.maximum(freqs - hi_hz, 0.0)
    return np.where(outside < EDGE_TAPER_HZ, 0.5 * (1.0 + np.cos(np.pi * np.minimum(outside / EDGE_TAPER_HZ, 1.0))), 0.0)


def speaker_utterance(spk: SyntheticSpeaker, duration_s: float, rng: np.random.Generator) -> np.ndarray:
    """One utterance with short leading and trailing silences.

    The pitch is offset by up to 3% per utterance and drifts slowly by 2%;
    harmonic gains are redrawn each time around a 1/sqrt(n) envelope.
    """
    n = int(duration_s * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE
    drift = 1.0 + 0.02 * np.sin(2 * np.pi * rng.uniform(0.3, 1.0) * t + rng.uniform(0, 2 * np.pi))
    f0 = spk.f0_hz * (1.0 + rng.uniform(-0.03, 0.03)) * drift
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    n_harm = int(HARMONIC_CEILING_HZ / (spk.f0_hz * 1.06))
    gains = rng.uniform(0.5, 1.0, n_harm) / np.sqrt(np.arange(1, n_harm + 1))
    gains *= passband_gain(np.arange(1, n_harm + 1) * spk.f0_hz, spk.band_low_hz, spk.band_high_hz)
    tone = np.zeros(n)
    for h in range(1, n_harm + 1):
        tone += gains[h - 1] * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    am = 1.0 + 0.6 * np.sin(2 * np.pi * spk.am_rate_hz * t + rng.uniform(0, 2 * np.pi))
    voiced = tone * am * gate(n, spk.mean_on_s, spk.mean_off_s, rng)
    lead = int(rng.uniform(0.1, 0.4) * SAMPLE_RATE)
    tail = int(rng.uniform(0.1, 0.4) * SAMPLE_RATE)
    voiced[:lead] = 0.0
    voiced[n - tail :] = 0.0
    out = voiced + FLOOR_AMPLITUDE * rng.standard_normal(n)
    return 0.5 * out / np.max(np.abs(out))


def noise_recording(duration_s: float, rng: np.random.Generator) -> np.ndarray:
    n = int(duration_s * SAMPLE_RATE)
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    tilt = rng.uniform(0.0, 1.5)
    spec *= 1.0 / np.maximum(freqs, 50.0) ** (tilt / 2)
    out = np.fft.irfft(spec, n)
    t = np.arange(n) / SAMPLE_RATE
    drift = 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.05, 0.3) * t + rng.uniform(0, 2 * np.pi))
    out = out * drift
    return 0.5 * out / np.max(np.abs(out))


def make_speakers(n_speakers: int, rng: np.random.Generator) -> list[SyntheticSpeaker]:
    # log-spaced pitches, randomly assigned to ids so any id-based split interleaves them
    f0s = np.geomspace(F0_LOW_HZ, F0_HIGH_HZ, n_speakers) if n_speakers > 1 else np.array([160.0])
    f0s = f0s[rng.permutation(n_speakers)]
    return [
        SyntheticSpeaker(
            speaker_id=f"spk{i:03d}",
            f0_hz=float(f),
            am_rate_hz=float(rng.uniform(3.0, 6.0)),
            mean_on_s=float(rng.uniform(0.8, 1.6)),
            mean_off_s=float(rng.uniform(0.1, 0.3)),
            band_low_hz=float(rng.uniform(80.0, 500.0)),
            band_high_hz=float(rng.uniform(3000.0, HARMONIC_CEILING_HZ)),
        )
        for i, f in enumerate(f0s)
    ]


def toy_corpus(out_dir, n_speakers: int, seed: int, utterances_per_speaker: int = 4,
               utterance_s: tuple[float, float] = (3.0, 6.0), n_noise: int = 8, noise_s: float = 12.0) -> str:
    """Write a synthetic corpus and return the path of its manifest JSON.

    Layout: ``<speaker_id>/uNN.wav`` per speaker, ``noise/nNN.wav`` for
    non-speech, ``speakers.json`` with the generating parameters and
    ``manifest.json`` mapping speaker ids (and ``_noise``) to WAV paths.
    """
    if n_speakers < 1:
        raise ValueError("n_speakers must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    root = np.random.SeedSequence(seed)
    spk_seq, utt_seq, noise_seq = root.spawn(3)
    speakers = make_speakers(n_speakers, np.random.default_rng(spk_seq))
    manifest: dict[str, list[str]] = {}
    for spk, seq in zip(speakers, utt_seq.spawn(n_speakers)):
        rng = np.random.default_rng(seq)
        os.makedirs(os.path.join(out_dir, spk.speaker_id), exist_ok=True)
        paths = []
        for u in range(utterances_per_speaker):
            rel = f"{spk.speaker_id}/u{u:02d}.wav"
            audio = speaker_utterance(spk, rng.uniform(*utterance_s), rng)
            write_wav(os.path.join(out_dir, rel), AudioSignal(audio))
            paths.append(rel)
        manifest[spk.speaker_id] = paths
    os.makedirs(os.path.join(out_dir, "noise"), exist_ok=True)
    noise_paths = []
    for j, seq in enumerate(noise_seq.spawn(n_noise)):
        rel = f"noise/n{j:02d}.wav"
        write_wav(os.path.join(out_dir, rel), AudioSignal(noise_recording(noise_s, np.random.default_rng(seq))))
        noise_paths.append(rel)
    manifest["_noise"] = noise_paths
    with open(os.path.join(out_dir, "speakers.json"), "w", encoding="utf-8") as fh:
        json.dump([asdict(s) for s in speakers], fh, indent=1)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return path
