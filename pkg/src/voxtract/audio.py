"""Mono waveform container and RIFF/WAVE file I/O.

Supported file flavours: PCM 16-bit signed little-endian and IEEE
float-32, mono only. 16-bit samples map to floats by division by 32768.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.io.wavfile

from .errors import InvalidInputError

DEFAULT_SAMPLE_RATE = 16000

_PCM16_SCALE = 32768.0


@dataclass(frozen=True)
class Waveform:
    """Mono audio buffer: float32 samples, nominal range [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float32)
        if arr.ndim != 1:
            raise InvalidInputError(f"waveform must be 1-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("waveform contains NaN or Inf")
        if int(self.sample_rate) <= 0:
            raise InvalidInputError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate

    def rms(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.sqrt(np.mean(self.samples.astype(np.float64) ** 2)))


def wav_read(path) -> Waveform:
    """Read a mono PCM16 or float32 WAV file."""
    try:
        sample_rate, data = scipy.io.wavfile.read(path)
    except ValueError as exc:
        raise InvalidInputError(f"unreadable WAV file {path}: {exc}") from exc
    if data.ndim != 1:
        raise InvalidInputError(f"{path}: only mono WAV is supported, got {data.ndim} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / _PCM16_SCALE
    elif data.dtype == np.float32:
        samples = data
    else:
        raise InvalidInputError(
            f"{path}: unsupported sample format {data.dtype}; expected int16 or float32"
        )
    return Waveform(samples, sample_rate)


def wav_write(path, w: Waveform, fmt: str = "float32") -> None:
    """Write a waveform as mono WAV. fmt is 'float32' (default) or 'pcm16'."""
    if fmt == "float32":
        scipy.io.wavfile.write(path, w.sample_rate, w.samples)
    elif fmt == "pcm16":
        clipped = np.clip(w.samples.astype(np.float64), -1.0, 1.0)
        ints = np.clip(np.round(clipped * _PCM16_SCALE), -32768, 32767).astype(np.int16)
        scipy.io.wavfile.write(path, w.sample_rate, ints)
    else:
        raise InvalidInputError(f"unknown WAV format {fmt!r}; use 'float32' or 'pcm16'")
