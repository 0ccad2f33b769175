import numpy as np
import pytest

from countkit.corpus import toy_corpus
from countkit.dsp import SAMPLE_RATE, AudioSignal
from countkit.mixer import load_manifest


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy_corpus")
    return toy_corpus(out, n_speakers=8, seed=11, utterances_per_speaker=3, n_noise=3, noise_s=6.0)


@pytest.fixture
def toy_pool(toy_manifest):
    return load_manifest(toy_manifest)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tone(freq_hz, duration_s, amplitude=1.0, sr=SAMPLE_RATE):
    t = np.arange(int(round(duration_s * sr))) / sr
    return AudioSignal(amplitude * np.cos(2 * np.pi * freq_hz * t), sr)
