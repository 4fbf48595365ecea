"""Windowed STFT analysis/synthesis, spectral masking, spectrogram export.

Analysis uses a periodic Hann window with reflect center-padding of
n_fft/2 on both ends, so the round trip istft(stft(w)) reconstructs w
exactly (up to float error) for any hop <= n_fft/2. Frame count is
S = 1 + ceil(len(w) / hop); the padded signal is zero-extended so every
frame is fully populated. Sample buffers are float32 at the boundary;
DFT and overlap-add accumulate in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .audio import Waveform
from .errors import InvalidInputError

_WSUM_FLOOR = 1e-11


@lru_cache(maxsize=8)
def hann_periodic(n_fft: int) -> np.ndarray:
    """Periodic Hann window of length n_fft (float64)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n_fft) / n_fft)


@dataclass(frozen=True)
class Stft:
    """Magnitude/phase spectrogram pair with the geometry needed to invert it."""

    magnitude: np.ndarray  # (S, n_fft//2 + 1), >= 0
    phase: np.ndarray  # (S, n_fft//2 + 1), radians in (-pi, pi]
    n_fft: int
    hop: int
    original_len: int

    def __post_init__(self):
        mag = np.asarray(self.magnitude, dtype=np.float64)
        ph = np.asarray(self.phase, dtype=np.float64)
        if mag.shape != ph.shape:
            raise InvalidInputError(
                f"magnitude shape {mag.shape} != phase shape {ph.shape}"
            )
        if mag.ndim != 2 or mag.shape[1] != self.n_fft // 2 + 1:
            raise InvalidInputError(
                f"expected (S, {self.n_fft // 2 + 1}) spectrogram, got {mag.shape}"
            )
        if mag.size and mag.min() < 0:
            raise InvalidInputError("magnitude entries must be non-negative")
        object.__setattr__(self, "magnitude", mag)
        object.__setattr__(self, "phase", ph)

    @property
    def n_frames(self) -> int:
        return self.magnitude.shape[0]

    @property
    def n_bins(self) -> int:
        return self.magnitude.shape[1]


@dataclass(frozen=True)
class Mask:
    """Non-negative per-bin gain applied to a spectrogram magnitude."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise InvalidInputError(f"mask must be 2-D, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise InvalidInputError("mask contains NaN or Inf")
        if vals.size and vals.min() < 0:
            raise InvalidInputError("mask entries must be non-negative")
        object.__setattr__(self, "values", vals)


def frame_count(n_samples: int, hop: int) -> int:
    return 1 + int(np.ceil(n_samples / hop))


def pad_layout(n_samples: int, n_fft: int, hop: int):
    """(reflect pad, extra zero pad, padded length) for the centering scheme."""
    n_frames = frame_count(n_samples, hop)
    padded_len = (n_frames - 1) * hop + n_fft
    reflect = n_fft // 2
    extra = padded_len - (n_samples + 2 * reflect)
    return reflect, max(extra, 0), padded_len


def stft(w: Waveform, n_fft: int = 512, hop: int = 128) -> Stft:
    """Magnitude/phase STFT of a mono waveform.

    Raises InvalidInputError for an empty or non-finite input, odd n_fft,
    or hop outside (0, n_fft].
    """
    if len(w) == 0:
        raise InvalidInputError("cannot take STFT of an empty waveform")
    if n_fft <= 0 or n_fft % 2 != 0:
        raise InvalidInputError(f"n_fft must be a positive even integer, got {n_fft}")
    if not 0 < hop <= n_fft:
        raise InvalidInputError(f"hop must be in (0, n_fft], got {hop}")
    x = w.samples.astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("waveform contains NaN or Inf")

    reflect, extra, padded_len = pad_layout(len(w), n_fft, hop)
    xp = np.pad(x, reflect, mode="reflect")
    if extra:
        xp = np.concatenate([xp, np.zeros(extra)])
    n_frames = frame_count(len(w), hop)
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = xp[idx] * hann_periodic(n_fft)[None, :]
    spec = np.fft.rfft(frames, axis=1)
    return Stft(np.abs(spec), np.angle(spec), n_fft, hop, len(w))


def istft(s: Stft, sample_rate: int = 16000) -> Waveform:
    """Windowed overlap-add inverse of stft; returns exactly original_len samples."""
    win = hann_periodic(s.n_fft)
    spec = s.magnitude * np.exp(1j * s.phase)
    frames = np.fft.irfft(spec, n=s.n_fft, axis=1) * win[None, :]

    padded_len = (s.n_frames - 1) * s.hop + s.n_fft
    y = np.zeros(padded_len)
    wsum = np.zeros(padded_len)
    idx = np.arange(s.n_fft)[None, :] + s.hop * np.arange(s.n_frames)[:, None]
    np.add.at(y, idx, frames)
    np.add.at(wsum, idx, np.broadcast_to(win**2, frames.shape))
    y = y / np.maximum(wsum, _WSUM_FLOOR)

    start = s.n_fft // 2
    out = y[start : start + s.original_len]
    return Waveform(out.astype(np.float32), sample_rate)


def apply_mask(s: Stft, m: Mask) -> Stft:
    """Element-wise mask on the magnitude; phase is copied unchanged."""
    if m.values.shape != s.magnitude.shape:
        raise InvalidInputError(
            f"mask shape {m.values.shape} != spectrogram shape {s.magnitude.shape}"
        )
    return Stft(m.values * s.magnitude, s.phase.copy(), s.n_fft, s.hop, s.original_len)


def export_spectrogram_image(s: Stft, path, dynamic_range_db: float = 80.0) -> None:
    """Write the log-magnitude spectrogram as a grayscale PNG.

    Frequency runs along the vertical axis (bin 0 at the bottom row),
    time along the horizontal. Image size is (n_fft/2+1) x S.
    """
    from PIL import Image

    db = 20.0 * np.log10(s.magnitude + 1e-8)
    top = db.max()
    span = top - db.min()
    if span < 1e-9:
        pixels = np.zeros(db.shape, dtype=np.uint8)
    else:
        scaled = np.clip((db - (top - dynamic_range_db)) / dynamic_range_db, 0.0, 1.0)
        pixels = np.round(scaled * 255.0).astype(np.uint8)
    # rows are frequency bins, origin at the bottom
    img = Image.fromarray(pixels.T[::-1], mode="L")
    img.save(path, format="PNG")
