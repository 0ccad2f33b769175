"""Time-frequency input representations.

All four representations share one framing geometry: 25 ms Hann frames
(400 samples at 16 kHz) every 10 ms (160 samples), computed on the signal
reflect-padded by 120 samples on each side. A 5 s signal therefore yields
exactly 500 frames.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache
from math import gcd

import numpy as np
import scipy.fft
import scipy.io.wavfile
import scipy.signal

from .errors import CountkitError, SignalTooShort

SAMPLE_RATE = 16000
FRAME_LENGTH = 400
HOP_LENGTH = 160
N_FFT = 400
PAD = 120
N_MELS = 40
N_MFCC = 20
MFCC_FLOOR = 1e-10


class FeatureKind(str, enum.Enum):
    STFT = "stft"
    LOGSTFT = "logstft"
    MEL40 = "mel40"
    MFCC20 = "mfcc20"

    @property
    def n_features(self) -> int:
        return {"stft": N_FFT // 2 + 1, "logstft": N_FFT // 2 + 1, "mel40": N_MELS, "mfcc20": N_MFCC}[
            self.value
        ]


@dataclass
class AudioSignal:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise CountkitError("AudioSignal expects a mono 1-D sample buffer")
        if not np.all(np.isfinite(self.samples)):
            raise CountkitError("AudioSignal contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    def scaled(self, gain: float) -> "AudioSignal":
        return AudioSignal(self.samples * gain, self.sample_rate)


@dataclass
class TFRepresentation:
    data: np.ndarray
    feature_kind: FeatureKind
    frame_hop_s: float = field(default=HOP_LENGTH / SAMPLE_RATE)
    frame_len_s: float = field(default=FRAME_LENGTH / SAMPLE_RATE)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_features(self) -> int:
        return self.data.shape[1]


def expected_frames(n_samples: int) -> int:
    """Number of frames produced for a signal of ``n_samples`` samples."""
    return 1 + (n_samples + 2 * PAD - FRAME_LENGTH) // HOP_LENGTH


@lru_cache(maxsize=None)
def hann_window(length: int = FRAME_LENGTH) -> np.ndarray:
    # periodic variant
    n = np.arange(length)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)


def _check_signal(signal: AudioSignal) -> None:
    if signal.sample_rate != SAMPLE_RATE:
        raise CountkitError(f"expected {SAMPLE_RATE} Hz audio, got {signal.sample_rate} Hz")
    if len(signal) < FRAME_LENGTH:
        raise SignalTooShort(f"need at least {FRAME_LENGTH} samples, got {len(signal)}")


def frames(signal: AudioSignal) -> np.ndarray:
    """Windowed D x 400 frame matrix of the padded signal."""
    _check_signal(signal)
    padded = np.pad(signal.samples, PAD, mode="reflect")
    view = np.lib.stride_tricks.sliding_window_view(padded, FRAME_LENGTH)[::HOP_LENGTH]
    return view * hann_window()


def stft_magnitude(signal: AudioSignal) -> TFRepresentation:
    spec = np.abs(np.fft.rfft(frames(signal), n=N_FFT, axis=1))
    return TFRepresentation(spec, FeatureKind.STFT)


def log_stft(signal: AudioSignal) -> TFRepresentation:
    return TFRepresentation(np.log1p(stft_magnitude(signal).data), FeatureKind.LOGSTFT)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def _mel_filterbank_cached(n_mels: int, n_fft: int, sample_rate: int, fmax: float) -> np.ndarray:
    n_bins = n_fft // 2 + 1
    edges_hz = mel_to_hz(np.linspace(0.0, hz_to_mel(fmax), n_mels + 2))
    edges = np.round(edges_hz * n_fft / sample_rate).astype(int)
    if np.any(np.diff(edges) <= 0):
        raise CountkitError("mel filter edges collapse onto the same FFT bin")
    bank = np.zeros((n_mels, n_bins))
    bins = np.arange(n_bins)
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rise = (bins - lo) / (mid - lo)
        fall = (hi - bins) / (hi - mid)
        bank[m] = np.clip(np.minimum(rise, fall), 0.0, None)
    bank.setflags(write=False)
    return bank


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
                   fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filterbank, shape ``(n_mels, n_fft // 2 + 1)``.

    Filter edges are snapped to FFT bins, so every filter peaks at exactly 1.0
    on its centre bin and neighbouring filters sum to one between their centres.
    """
    fmax = sample_rate / 2 if fmax is None else fmax
    return _mel_filterbank_cached(n_mels, n_fft, sample_rate, float(fmax))


def mel40(signal: AudioSignal) -> TFRepresentation:
    mag = stft_magnitude(signal).data
    return TFRepresentation(mag @ mel_filterbank().T, FeatureKind.MEL40)


def mfcc_from_mel(mel: np.ndarray, n_coeffs: int = N_MFCC) -> np.ndarray:
    logmel = np.log(mel + MFCC_FLOOR)
    return scipy.fft.dct(logmel, type=2, norm="ortho", axis=-1)[..., :n_coeffs]


def mfcc20(signal: AudioSignal) -> TFRepresentation:
    return TFRepresentation(mfcc_from_mel(mel40(signal).data), FeatureKind.MFCC20)


_EXTRACTORS = {
    FeatureKind.STFT: stft_magnitude,
    FeatureKind.LOGSTFT: log_stft,
    FeatureKind.MEL40: mel40,
    FeatureKind.MFCC20: mfcc20,
}


def extract(signal: AudioSignal, kind: FeatureKind | str) -> TFRepresentation:
    return _EXTRACTORS[FeatureKind(kind)](signal)


# ---------------------------------------------------------------------------
# WAV ingestion
# ---------------------------------------------------------------------------


def resample(samples: np.ndarray, orig_rate: int, target_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Polyphase windowed-sinc resampling (Kaiser beta 8, 64 taps per phase)."""
    if orig_rate == target_rate:
        return np.asarray(samples, dtype=np.float64)
    g = gcd(orig_rate, target_rate)
    up, down = target_rate // g, orig_rate // g
    max_rate = max(up, down)
    half_len = 32 * max_rate
    h = scipy.signal.firwin(2 * half_len + 1, 1.0 / max_rate, window=("kaiser", 8.0))
    return scipy.signal.resample_poly(np.asarray(samples, dtype=np.float64), up, down, window=h)


def read_wav(path) -> AudioSignal:
    """Read a RIFF WAV file as mono float audio at 16 kHz."""
    rate, data = scipy.io.wavfile.read(path)
    if data.dtype == np.int16:
        data = data / 32768.0
    elif data.dtype == np.int32:
        data = data / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype.kind == "f":
        data = data.astype(np.float64)
    else:
        raise CountkitError(f"unsupported WAV sample type {data.dtype} in {path}")
    if data.ndim == 2:
        data = data.mean(axis=1)
    return AudioSignal(resample(data, int(rate)), SAMPLE_RATE)


def write_wav(path, signal: AudioSignal, pcm16: bool = True) -> None:
    if pcm16:
        data = np.clip(np.round(signal.samples * 32767.0), -32768, 32767).astype(np.int16)
    else:
        data = signal.samples.astype(np.float32)
    scipy.io.wavfile.write(path, signal.sample_rate, data)
