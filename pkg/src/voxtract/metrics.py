"""Waveform and spectral quality metrics plus the oracle ratio mask.

SI-SNR zero-means both signals, projects the estimate onto the target to
cancel gain, and reports the energy ratio in dB. SDR is the plain
energy-ratio form (no filter-allowed projection). Both clamp to
[-60, +60] dB so perfect reconstruction stays finite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .audio import Waveform
from .dsp import Mask, Stft
from .errors import InvalidInputError

DB_CLAMP = 60.0
IRM_EPS = 1e-8
IRM_CLIP_MAX = 10.0


def _clamp_db(num: float, den: float) -> float:
    if num <= 0.0:
        return -DB_CLAMP
    if den <= 0.0:
        return DB_CLAMP
    return float(np.clip(10.0 * np.log10(num / den), -DB_CLAMP, DB_CLAMP))


def _check_pair(estimate: Waveform, target: Waveform):
    if len(estimate) != len(target):
        raise InvalidInputError(
            f"length mismatch: estimate {len(estimate)} vs target {len(target)}"
        )
    if len(target) == 0:
        raise InvalidInputError("empty signals")
    return (
        estimate.samples.astype(np.float64),
        target.samples.astype(np.float64),
    )


def si_snr_arrays(est: np.ndarray, tgt: np.ndarray) -> float:
    """SI-SNR core on float64 arrays (already validated)."""
    est = est - est.mean()
    tgt = tgt - tgt.mean()
    tgt_energy = float(np.dot(tgt, tgt))
    if tgt_energy <= 0.0:
        raise InvalidInputError("target has zero energy after mean removal")
    s_target = (np.dot(est, tgt) / tgt_energy) * tgt
    e_noise = est - s_target
    return _clamp_db(float(np.dot(s_target, s_target)), float(np.dot(e_noise, e_noise)))


def si_snr(estimate: Waveform, target: Waveform) -> float:
    """Scale-invariant signal-to-noise ratio in dB, clamped to [-60, 60]."""
    est, tgt = _check_pair(estimate, target)
    return si_snr_arrays(est, tgt)


def sdr(estimate: Waveform, target: Waveform) -> float:
    """Plain source-to-distortion ratio in dB, clamped to [-60, 60]."""
    est, tgt = _check_pair(estimate, target)
    tgt_energy = float(np.dot(tgt, tgt))
    if tgt_energy <= 0.0:
        raise InvalidInputError("target has zero energy")
    err = tgt - est
    return _clamp_db(tgt_energy, float(np.dot(err, err)))


def mse_spectral_loss(estimate_mag: np.ndarray, target_mag: np.ndarray) -> float:
    """Mean squared difference over all magnitude entries."""
    est = np.asarray(estimate_mag, dtype=np.float64)
    tgt = np.asarray(target_mag, dtype=np.float64)
    if est.shape != tgt.shape:
        raise InvalidInputError(f"shape mismatch: {est.shape} vs {tgt.shape}")
    return float(np.mean((est - tgt) ** 2))


def ideal_ratio_mask(clean: Stft, noisy: Stft) -> Mask:
    """Oracle mask clean/(noisy + eps), clipped to [0, 10]."""
    if clean.magnitude.shape != noisy.magnitude.shape:
        raise InvalidInputError(
            f"shape mismatch: clean {clean.magnitude.shape} vs noisy {noisy.magnitude.shape}"
        )
    ratio = clean.magnitude / (noisy.magnitude + IRM_EPS)
    return Mask(np.clip(ratio, 0.0, IRM_CLIP_MAX))


@dataclass(frozen=True)
class ScoreReport:
    """Per-item and aggregate SI-SNR/SDR scores. Aggregates are arithmetic means."""

    si_snr_db: float
    sdr_db: float
    per_item: tuple  # of (item_id, si_snr_db, sdr_db)

    @classmethod
    def from_items(cls, items) -> "ScoreReport":
        items = tuple((str(i), float(s), float(d)) for i, s, d in items)
        if not items:
            raise InvalidInputError("cannot build a report from zero items")
        return cls(
            si_snr_db=float(np.mean([s for _, s, _ in items])),
            sdr_db=float(np.mean([d for _, _, d in items])),
            per_item=items,
        )

    def to_jsonl(self) -> str:
        """One record per item, then the aggregate record (field order fixed)."""
        lines = [
            json.dumps({"item": i, "si_snr_db": s, "sdr_db": d})
            for i, s, d in self.per_item
        ]
        lines.append(
            json.dumps(
                {"item": "aggregate", "si_snr_db": self.si_snr_db, "sdr_db": self.sdr_db}
            )
        )
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())
