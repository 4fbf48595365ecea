"""Differentiable graph builders mirroring the dsp module.

The inverse transform is linear in the magnitude once phase is fixed, so
it is expressed with explicit cosine/sine basis matrices; the forward
magnitude uses the same bases plus a zero-safe hypot. Both agree with the
fft-based dsp implementations to float64 round-off (pinned by tests).
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dsp import _WSUM_FLOOR, frame_count, hann_periodic, pad_layout


@lru_cache(maxsize=4)
def _inverse_bases(n_fft: int):
    """(F, n) matrices turning (mag*cos, mag*sin) rows into time frames."""
    n_bins = n_fft // 2 + 1
    k = np.arange(n_bins)[:, None]
    t = np.arange(n_fft)[None, :]
    weights = np.full(n_bins, 2.0)
    weights[0] = 1.0
    weights[-1] = 1.0
    angle = 2.0 * np.pi * k * t / n_fft
    b_cos = (weights[:, None] / n_fft) * np.cos(angle)
    b_sin = -(weights[:, None] / n_fft) * np.sin(angle)
    return b_cos, b_sin


@lru_cache(maxsize=4)
def _forward_bases(n_fft: int):
    """(n, F) matrices computing the real/imag parts of the frame DFT."""
    n_bins = n_fft // 2 + 1
    t = np.arange(n_fft)[:, None]
    k = np.arange(n_bins)[None, :]
    angle = 2.0 * np.pi * k * t / n_fft
    return np.cos(angle), -np.sin(angle)


def _frame_indices(n_frames: int, n_fft: int, hop: int) -> np.ndarray:
    return np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]


def istft_graph(mag: Tensor, phase: np.ndarray, n_fft: int, hop: int, original_len: int) -> Tensor:
    """Differentiable overlap-add synthesis; output length is original_len."""
    b_cos, b_sin = _inverse_bases(n_fft)
    win = hann_periodic(n_fft)
    n_frames = mag.shape[0]
    frames = (mag * np.cos(phase)) @ Tensor(b_cos) + (mag * np.sin(phase)) @ Tensor(b_sin)
    frames = frames * Tensor(win)

    padded_len = (n_frames - 1) * hop + n_fft
    idx = _frame_indices(n_frames, n_fft, hop)
    wsum = np.zeros(padded_len)
    np.add.at(wsum, idx, np.broadcast_to(win**2, idx.shape))
    y = ad.scatter_add(frames, idx, padded_len) * Tensor(1.0 / np.maximum(wsum, _WSUM_FLOOR))
    start = n_fft // 2
    return y[start : start + original_len]


def stft_mag_graph(w: Tensor, n_fft: int, hop: int) -> Tensor:
    """Differentiable STFT magnitude of a waveform tensor (same layout as dsp.stft)."""
    n_samples = w.shape[0]
    reflect, extra, _ = pad_layout(n_samples, n_fft, hop)
    reflect_idx = np.pad(np.arange(n_samples), reflect, mode="reflect")
    padded = ad.take(w, reflect_idx)
    if extra:
        padded = ad.concat([padded, Tensor(np.zeros(extra))])
    idx = _frame_indices(frame_count(n_samples, hop), n_fft, hop)
    frames = ad.take(padded, idx) * Tensor(hann_periodic(n_fft))
    c_cos, c_sin = _forward_bases(n_fft)
    return ad.hypot(frames @ Tensor(c_cos), frames @ Tensor(c_sin))


_LOG10 = float(np.log(10.0))
_CLAMP_RATIO = 1e-6  # smooth +-60 dB cap, mirroring the metric's clamp


def si_snr_graph(estimate: Tensor, target: np.ndarray) -> Tensor:
    """SI-SNR in dB as a graph node (target is a constant).

    The energy ratio is smoothly capped to +-60 dB so near-perfect (or
    hopeless) reconstructions keep bounded gradients instead of the raw
    log blowing up as the error energy vanishes.
    """
    tgt = np.asarray(target, dtype=np.float64)
    tgt = tgt - tgt.mean()
    tgt_energy = float(np.dot(tgt, tgt))
    est = estimate - estimate.mean()
    coeff = ad.tsum(est * Tensor(tgt)) * (1.0 / tgt_energy)
    s_target = coeff * Tensor(tgt)
    e_noise = est - s_target
    num = ad.tsum(s_target * s_target)
    den = ad.tsum(e_noise * e_noise)
    ratio = (num + _CLAMP_RATIO * den) / (den + _CLAMP_RATIO * num)
    return (10.0 / _LOG10) * ad.log(ratio)


def suppression_db_graph(estimate: Tensor, mixture: np.ndarray, floor: float = 1e-10) -> Tensor:
    """Output-vs-mixture energy in dB; the loss for target-absent examples."""
    mix_power = float(np.mean(np.asarray(mixture, dtype=np.float64) ** 2)) + floor
    est_power = ad.tmean(estimate * estimate) + floor
    return (10.0 / _LOG10) * ad.log(est_power * (1.0 / mix_power))


def mse_graph(estimate_mag: Tensor, target_mag: np.ndarray) -> Tensor:
    diff = estimate_mag - Tensor(np.asarray(target_mag, dtype=np.float64))
    return ad.tmean(diff * diff)


def cross_entropy_graph(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over rows of logits for integer labels."""
    labels = np.asarray(labels, dtype=np.intp)
    stable = logits - Tensor(logits.value.max(axis=1, keepdims=True))
    log_z = ad.log(ad.tsum(ad.exp(stable), axis=1, keepdims=True))
    log_probs = stable - log_z
    one_hot = np.zeros(logits.shape)
    one_hot[np.arange(labels.shape[0]), labels] = 1.0
    return -ad.tmean(ad.tsum(log_probs * Tensor(one_hot), axis=1))
