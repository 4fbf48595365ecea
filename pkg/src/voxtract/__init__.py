"""Target-speaker voice extraction at desk scale.

Pipeline: a frozen fingerprint encoder conditions a conformer mask
estimator on the target speaker; the estimated non-negative mask scales
the noisy magnitude spectrogram and the retained phase reconstructs the
waveform. Training minimizes negative SI-SNR, optionally jointly with a
toy recognizer through the chunk-merge schedule.
"""

from .audio import Waveform, wav_read, wav_write
from .dsp import Mask, Stft, apply_mask, export_spectrogram_image, istft, stft
from .errors import (
    ConfigError,
    FormatError,
    InvalidInputError,
    NumericError,
    StateError,
    VoxtractError,
)
from .metrics import ScoreReport, ideal_ratio_mask, mse_spectral_loss, sdr, si_snr
from .mixer import (
    Catalog,
    FileCatalog,
    MixtureExample,
    MixtureRecipe,
    SyntheticCatalog,
    SyntheticSpeakerSpec,
    convolve_rir,
    draw_recipe,
    realize,
    scale_to_snr,
    synth_speaker_utterance,
)
from .speaker import SpeakerEmbedding, encode, fuse, init_fusion

__all__ = [
    "Waveform",
    "wav_read",
    "wav_write",
    "Stft",
    "Mask",
    "stft",
    "istft",
    "apply_mask",
    "export_spectrogram_image",
    "si_snr",
    "sdr",
    "mse_spectral_loss",
    "ideal_ratio_mask",
    "ScoreReport",
    "SpeakerEmbedding",
    "encode",
    "fuse",
    "init_fusion",
    "MixtureRecipe",
    "MixtureExample",
    "SyntheticSpeakerSpec",
    "SyntheticCatalog",
    "FileCatalog",
    "Catalog",
    "draw_recipe",
    "realize",
    "scale_to_snr",
    "convolve_rir",
    "synth_speaker_utterance",
    "VoxtractError",
    "InvalidInputError",
    "ConfigError",
    "FormatError",
    "NumericError",
    "StateError",
]
