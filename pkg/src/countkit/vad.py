"""Energy-based voice activity detection on 10 ms frames."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import HOP_LENGTH, AudioSignal
from .errors import AllSilent, ParseError

DEFAULT_THRESHOLD_DB = -40.0
DEFAULT_HANGOVER = 8
REFERENCE_PERCENTILE = 95.0


@dataclass
class VadTrack:
    activity: np.ndarray
    hop_s: float = HOP_LENGTH / 16000

    def __post_init__(self):
        self.activity = np.asarray(self.activity, dtype=np.uint8)
        if self.activity.ndim != 1:
            raise ValueError("VadTrack activity must be 1-D")
        if np.any(self.activity > 1):
            raise ValueError("VadTrack activity must be binary")

    def __len__(self) -> int:
        return len(self.activity)

    def __eq__(self, other):
        return isinstance(other, VadTrack) and np.array_equal(self.activity, other.activity)


def frame_rms(samples: np.ndarray, hop: int = HOP_LENGTH) -> np.ndarray:
    n = len(samples) // hop
    blocks = np.asarray(samples[: n * hop], dtype=np.float64).reshape(n, hop)
    return np.sqrt(np.mean(blocks**2, axis=1))


def apply_hangover(active: np.ndarray, hangover_frames: int) -> np.ndarray:
    """Extend every active run by ``hangover_frames`` frames."""
    active = np.asarray(active, dtype=bool)
    out = active.copy()
    if hangover_frames <= 0:
        return out.astype(np.uint8)
    # a run ends at t when active[t] and not active[t + 1]
    ends = np.flatnonzero(active & ~np.append(active[1:], False))
    for t in ends:
        out[t + 1 : t + 1 + hangover_frames] = True
    return out.astype(np.uint8)


def energy_vad(signal: AudioSignal, threshold_db: float = DEFAULT_THRESHOLD_DB,
               hangover_frames: int = DEFAULT_HANGOVER) -> VadTrack:
    """Mark frames whose RMS lies within ``threshold_db`` of the loud frames.

    The reference level is the 95th-percentile frame RMS of the signal itself,
    so the result does not depend on the overall gain.
    """
    rms = frame_rms(signal.samples)
    if rms.size == 0:
        return VadTrack(np.zeros(0, dtype=np.uint8))
    ref = np.percentile(rms, REFERENCE_PERCENTILE)
    if ref <= 0.0:
        return VadTrack(np.zeros(rms.size, dtype=np.uint8))
    with np.errstate(divide="ignore"):
        level_db = 20.0 * np.log10(rms / ref)
    return VadTrack(apply_hangover(level_db > threshold_db, hangover_frames))


def active_span(track: VadTrack) -> tuple[int, int]:
    idx = np.flatnonzero(track.activity)
    if idx.size == 0:
        raise AllSilent("no active frame in track")
    return int(idx[0]), int(idx[-1]) + 1


def trim_silence(signal: AudioSignal, track: VadTrack) -> tuple[AudioSignal, VadTrack]:
    """Drop leading and trailing inactive frames and their samples."""
    if len(track) != len(signal) // HOP_LENGTH:
        raise ValueError("VAD track length does not match the signal")
    first, last = active_span(track)
    start = first * HOP_LENGTH
    # keep the sub-frame remainder only when the final frame survives
    stop = len(signal) if last == len(track) else last * HOP_LENGTH
    return (
        AudioSignal(signal.samples[start:stop], signal.sample_rate),
        VadTrack(track.activity[first:last], track.hop_s),
    )


def parse_vad_text(text: str) -> VadTrack:
    symbols = "".join(text.split())
    bad = set(symbols) - {"0", "1"}
    if bad:
        raise ParseError(f"invalid VAD symbols: {''.join(sorted(bad))!r}")
    return VadTrack(np.fromiter((c == "1" for c in symbols), dtype=np.uint8, count=len(symbols)))


def load_external_vad(path) -> VadTrack:
    """Load a frame annotation file of '0'/'1' characters (newlines ignored)."""
    with open(path, encoding="utf-8") as fh:
        return parse_vad_text(fh.read())


def save_vad(path, track: VadTrack) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("".join("1" if v else "0" for v in track.activity))
        fh.write("\n")
