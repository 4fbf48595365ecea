import numpy as np
import pytest

from voxtract.audio import Waveform


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_waveform(rng, seconds=1.0, sample_rate=16000, scale=0.2):
    n = int(round(seconds * sample_rate))
    return Waveform(rng.normal(scale=scale, size=n).astype(np.float32), sample_rate)


def sine_waveform(freq_hz, seconds=1.0, sample_rate=16000, amplitude=0.5):
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    return Waveform((amplitude * np.sin(2 * np.pi * freq_hz * t)).astype(np.float32), sample_rate)


def rms(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.mean(x**2)))
