import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from countkit.dsp import SAMPLE_RATE, AudioSignal, write_wav
from countkit.errors import CorpusExhausted, EmptyTrackList, LengthMismatch
from countkit.mixer import (
    Speaker,
    SpeakerPool,
    UtteranceCache,
    active_rms,
    build_speaker_track,
    compute_k,
    equalize,
    load_manifest,
    make_negative_sample,
    mix,
    synthesize_mixture,
)
from countkit.vad import VadTrack

from conftest import tone


def brute_k(v):
    best = 0
    for t in range(v.shape[1]):
        s = 0
        for l in range(v.shape[0]):
            s += int(v[l, t])
        best = max(best, s)
    return best


def test_compute_k_basics():
    assert compute_k(np.zeros((3, 10))) == 0
    assert compute_k(np.eye(4)) == 1
    assert compute_k(np.zeros((0, 7))) == 0
    assert compute_k(np.zeros((0, 0))) == 0


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 10), st.integers(1, 200)), elements=st.integers(0, 1)))
def test_compute_k_matches_brute_force(v):
    assert compute_k(v) == brute_k(v)


def _utterance(path, seconds, freq, lead=0.2, tail=0.2):
    x = np.concatenate([np.zeros(int(lead * SAMPLE_RATE)), tone(freq, seconds, 0.5).samples,
                        np.zeros(int(tail * SAMPLE_RATE))])
    write_wav(path, AudioSignal(x))
    return str(path)


def test_track_truncates_long_utterance(tmp_path):
    spk = Speaker("a", [_utterance(tmp_path / "u.wav", 12.0, 300)])
    sig, track = build_speaker_track(spk, 10.0, 0)
    assert len(sig) == 160000
    assert len(track) == 1000
    assert track.activity.all()


def test_track_repeats_short_utterances(tmp_path):
    spk = Speaker("a", [_utterance(tmp_path / "u0.wav", 4.0, 300), _utterance(tmp_path / "u1.wav", 4.0, 400)])
    sig, track = build_speaker_track(spk, 10.0, 3)
    # trimmed utterances keep 4 s plus the 80 ms hangover, so three pieces are needed
    assert len(sig) == 160000 and len(track) == 1000
    with pytest.raises(CorpusExhausted):
        build_speaker_track(spk, 10.0, 3, allow_repeat=False)


def test_short_target(tmp_path):
    spk = Speaker("a", [_utterance(tmp_path / "u.wav", 1.0, 300)])
    sig, track = build_speaker_track(spk, 0.5, 0)
    assert len(sig) == 8000 and len(track) == 50


def test_silent_speaker_exhausted(tmp_path):
    write_wav(tmp_path / "z.wav", AudioSignal(np.zeros(16000)))
    spk = Speaker("a", [str(tmp_path / "z.wav")])
    with pytest.raises(CorpusExhausted):
        build_speaker_track(spk, 1.0, 0)


def _track(active, n_frames=100, amp=1.0, freq=300.0):
    act = np.zeros(n_frames, dtype=np.uint8)
    act[active] = 1
    x = tone(freq, n_frames / 100, amp).samples * np.repeat(act, 160)
    return AudioSignal(x), VadTrack(act)


def test_mix_single_track():
    sig, track = _track(slice(10, 60))
    m = mix([(sig, track)])
    assert m.k == 1
    assert np.max(np.abs(m.mixture.samples)) == pytest.approx(0.99)
    assert np.allclose(m.mixture.samples, sig.samples * 0.99 / np.max(np.abs(sig.samples)))


def test_mix_disjoint_and_overlapping():
    disjoint = [_track(slice(0, 30)), _track(slice(30, 60)), _track(slice(60, 90))]
    assert mix(disjoint).k == 1
    overlap = [_track(slice(0, 50)), _track(slice(40, 60)), _track(slice(45, 90))]
    m = mix(overlap)
    assert m.k == 3 == brute_k(m.per_speaker_vad)


def test_equal_active_rms():
    tracks = [_track(slice(0, 50), amp=1.0), _track(slice(20, 90), amp=0.01, freq=700.0),
              _track(slice(5, 15), amp=0.3, freq=1100.0)]
    scaled = equalize(tracks)
    ref = active_rms(AudioSignal(scaled[0]), tracks[0][1])
    for x, (_, t) in zip(scaled, tracks):
        assert active_rms(AudioSignal(x), t) == pytest.approx(ref, rel=1e-6)


def test_mix_errors():
    with pytest.raises(EmptyTrackList):
        mix([])
    with pytest.raises(LengthMismatch):
        mix([_track(slice(0, 5), 100), _track(slice(0, 5), 90)])


def test_manifest_and_synthesis(toy_manifest):
    pool, noise = load_manifest(toy_manifest)
    assert len(pool) == 8 and len(noise) == 3
    m = synthesize_mixture(pool, 3, 4.0, 42, k_max=3)
    assert len(m.mixture) == 64000
    assert m.per_speaker_vad.shape == (3, 400)
    assert m.k == compute_k(m.per_speaker_vad) <= 3
    assert 0 < np.max(np.abs(m.mixture.samples)) <= 1.0
    assert len(set(m.speaker_ids)) == 3
    again = synthesize_mixture(pool, 3, 4.0, 42, k_max=3)
    assert np.array_equal(m.mixture.samples, again.mixture.samples)
    with pytest.raises(CorpusExhausted):
        synthesize_mixture(pool, 9, 1.0, 0)


def test_negative_sample(toy_manifest):
    _, noise = load_manifest(toy_manifest)
    m = make_negative_sample(noise, 5.0, 7)
    assert m.k == 0
    assert len(m.mixture) == 80000
    assert m.per_speaker_vad.shape == (0, 500)
    assert np.max(np.abs(m.mixture.samples)) == pytest.approx(0.99)
    # longer than any noise file: tiled
    assert len(make_negative_sample(noise, 9.0, 1).mixture) == 144000
    with pytest.raises(CorpusExhausted):
        make_negative_sample([], 1.0, 0)


def test_manifest_layout(tmp_path):
    p = _utterance(tmp_path / "x.wav", 1.0, 300)
    (tmp_path / "m.json").write_text(json.dumps({"b": ["x.wav"], "a": [p], "_noise": ["x.wav"]}))
    pool, noise = load_manifest(tmp_path / "m.json")
    assert [s.speaker_id for s in pool.speakers] == ["a", "b"]
    assert noise == [str(tmp_path / "x.wav")]


def test_pool_validation():
    with pytest.raises(ValueError):
        SpeakerPool([Speaker("a", ["x"]), Speaker("a", ["y"])])
    with pytest.raises(ValueError):
        SpeakerPool([Speaker("a", [])])


def test_cache_uses_vad_settings(tmp_path):
    p = _utterance(tmp_path / "u.wav", 1.0, 300, lead=0.5, tail=0.5)
    strict = UtteranceCache(hangover_frames=0).trimmed(p)[1]
    loose = UtteranceCache(hangover_frames=20).trimmed(p)[1]
    assert len(loose) == len(strict) + 20
