"""Seeded cocktail-party mixture synthesis.

A MixtureRecipe is a compact, serializable description of one noisy
example: everything realize() needs is either stored in the recipe or
re-derived deterministically from recipe.seed, so (seed, catalog) maps to
a byte-identical MixtureExample on every run.

All randomness flows through numpy's PCG64 generator. Component streams
are derived with SeedSequence([seed, stream_key]); the stream keys are
module constants, which makes recipes portable across processes.

Synthetic speakers are band-limited: an utterance is a sequence of
fixed-length tokens, each a small stack of partials inside one sub-slice
of the speaker's carrier band, over a low-level in-band noise bed, with
slow amplitude modulation. Token sequences cover the vocabulary in
shuffled blocks, so two utterances of one speaker always share the same
band-occupancy profile while their token order stays random.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.signal

from .audio import Waveform, wav_read, wav_write
from .errors import ConfigError, InvalidInputError

P_NOISE = 0.8
P_RIR = 0.3
SNR_LOW_DB = 1.0
SNR_HIGH_DB = 20.0
MAX_INTERFERERS = 3

TOKEN_VOCAB = 8
TOKEN_SAMPLES = 4096
_TOKEN_RAMP = 256
_BED_ENERGY_FRACTION = 0.35
_UTTERANCE_PEAK = 0.45

# stream keys for SeedSequence([seed, key])
_S_RECIPE = 101
_S_CAST = 102
_S_RENDER = 103
_S_TOKENS = 104
_S_PHASES = 105
_S_PAIR_CLEAN = 106
_S_PAIR_REF = 107


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *keys])))


def child_seed(seed: int, *keys: int) -> int:
    """Derived 64-bit seed for a sub-component; stable across platforms."""
    return int(np.random.SeedSequence([int(seed), *keys]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class SyntheticSpeakerSpec:
    """Desk-scale stand-in for a real speaker: a band-limited voice."""

    speaker_id: str
    carrier_band: tuple  # (low_hz, high_hz)
    modulation_rate: float
    harmonic_count: int

    def __post_init__(self):
        lo, hi = self.carrier_band
        if not 0 < lo < hi:
            raise ConfigError(f"carrier band must satisfy 0 < low < high, got {self.carrier_band}")
        if self.harmonic_count < 1:
            raise ConfigError("harmonic_count must be >= 1")


@dataclass(frozen=True)
class MixtureRecipe:
    seed: int
    target_id: str
    n_interferers: int
    interferer_snrs_db: tuple
    has_noise: bool
    noise_snr_db: float
    has_rir: bool
    rir_id: str | None

    def __post_init__(self):
        if not 0 <= self.n_interferers <= MAX_INTERFERERS:
            raise InvalidInputError(f"n_interferers out of range: {self.n_interferers}")
        if len(self.interferer_snrs_db) != self.n_interferers:
            raise InvalidInputError("interferer_snrs_db length must equal n_interferers")
        for snr in (*self.interferer_snrs_db, self.noise_snr_db):
            if not SNR_LOW_DB <= snr <= SNR_HIGH_DB:
                raise InvalidInputError(f"SNR {snr} outside [{SNR_LOW_DB}, {SNR_HIGH_DB}] dB")
        if self.has_rir != (self.rir_id is not None):
            raise InvalidInputError("rir_id must be present exactly when has_rir is set")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "target_id": self.target_id,
            "n_interferers": self.n_interferers,
            "interferer_snrs_db": list(self.interferer_snrs_db),
            "has_noise": self.has_noise,
            "noise_snr_db": self.noise_snr_db,
            "has_rir": self.has_rir,
            "rir_id": self.rir_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureRecipe":
        return cls(
            seed=int(d["seed"]),
            target_id=str(d["target_id"]),
            n_interferers=int(d["n_interferers"]),
            interferer_snrs_db=tuple(float(x) for x in d["interferer_snrs_db"]),
            has_noise=bool(d["has_noise"]),
            noise_snr_db=float(d["noise_snr_db"]),
            has_rir=bool(d["has_rir"]),
            rir_id=d["rir_id"],
        )


@dataclass(frozen=True)
class MixtureExample:
    noisy: Waveform
    clean_target: Waveform
    reference_utterance: Waveform
    recipe: MixtureRecipe

    def __post_init__(self):
        rates = {
            self.noisy.sample_rate,
            self.clean_target.sample_rate,
            self.reference_utterance.sample_rate,
        }
        if len(rates) != 1:
            raise InvalidInputError(f"waveforms disagree on sample rate: {rates}")
        if len(self.noisy) != len(self.clean_target):
            raise InvalidInputError("noisy and clean_target must have equal length")


# ---------------------------------------------------------------------------
# synthetic audio


def utterance_tokens(seed: int, n_tokens: int) -> tuple:
    """Token sequence covering the vocabulary in shuffled blocks."""
    rng = _rng(seed, _S_TOKENS)
    out = []
    while len(out) < n_tokens:
        out.extend(rng.permutation(TOKEN_VOCAB).tolist())
    return tuple(int(t) for t in out[:n_tokens])


def _token_partials(spec: SyntheticSpeakerSpec, token: int) -> np.ndarray:
    lo, hi = spec.carrier_band
    slice_width = (hi - lo) / TOKEN_VOCAB
    slice_lo = lo + token * slice_width
    # 10% margins keep ramp sidebands inside the slice
    usable = slice_width * 0.8
    count = spec.harmonic_count
    return slice_lo + 0.1 * slice_width + (np.arange(count) + 0.5) * usable / count


def _band_noise(rng, n: int, sample_rate: int, bands) -> np.ndarray:
    """White noise confined to the given (low, high) Hz bands."""
    white = rng.normal(size=n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate)
    keep = np.zeros(freqs.shape, dtype=bool)
    for lo, hi in bands:
        keep |= (freqs >= lo) & (freqs <= hi)
    spec[~keep] = 0.0
    out = np.fft.irfft(spec, n=n)
    norm = np.sqrt(np.mean(out**2))
    return out / norm if norm > 0 else out


def synth_speaker_utterance(
    spec: SyntheticSpeakerSpec, duration_s: float, seed: int, sample_rate: int = 16000
) -> Waveform:
    """Render a seeded token-sequence utterance for a synthetic speaker."""
    if duration_s <= 0:
        raise InvalidInputError(f"duration must be positive, got {duration_s}")
    lo, hi = spec.carrier_band
    if hi >= sample_rate / 2:
        raise ConfigError(
            f"carrier band {spec.carrier_band} exceeds Nyquist for rate {sample_rate}"
        )
    n_samples = int(round(duration_s * sample_rate))
    n_tokens = max(1, int(np.ceil(n_samples / TOKEN_SAMPLES)))
    tokens = utterance_tokens(seed, n_tokens)
    rng = _rng(seed, _S_PHASES)

    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(_TOKEN_RAMP) / _TOKEN_RAMP)
    envelope = np.ones(TOKEN_SAMPLES)
    envelope[:_TOKEN_RAMP] = ramp
    envelope[-_TOKEN_RAMP:] = ramp[::-1]

    t_token = np.arange(TOKEN_SAMPLES) / sample_rate
    segments = []
    for tok in tokens:
        seg = np.zeros(TOKEN_SAMPLES)
        for freq in _token_partials(spec, tok):
            seg += np.sin(2.0 * np.pi * freq * t_token + rng.uniform(0, 2 * np.pi))
        segments.append(seg * envelope)
    tones = np.concatenate(segments)[:n_samples]
    tones /= max(np.sqrt(np.mean(tones**2)), 1e-12)

    bed = _band_noise(rng, n_samples, sample_rate, [(lo, hi)])
    voice = np.sqrt(1.0 - _BED_ENERGY_FRACTION) * tones + np.sqrt(_BED_ENERGY_FRACTION) * bed

    t = np.arange(n_samples) / sample_rate
    am = 1.0 + 0.4 * np.sin(2.0 * np.pi * spec.modulation_rate * t + rng.uniform(0, 2 * np.pi))
    voice *= am
    voice *= _UTTERANCE_PEAK / max(np.max(np.abs(voice)), 1e-12)
    return Waveform(voice.astype(np.float32), sample_rate)


def synth_rir(seed: int, sample_rate: int = 16000, duration_s: float = 0.18) -> Waveform:
    """Direct path plus an exponentially decaying diffuse tail."""
    n = int(round(duration_s * sample_rate))
    rng = _rng(seed)
    h = np.zeros(n)
    h[0] = 1.0
    t = np.arange(1, n) / sample_rate
    h[1:] = 0.3 * rng.normal(size=n - 1) * np.exp(-t / 0.05)
    return Waveform(h.astype(np.float32), sample_rate)


# ---------------------------------------------------------------------------
# mixing operations


def scale_to_snr(signal: Waveform, reference: Waveform, snr_db: float) -> Waveform:
    """Rescale signal so 10*log10(P_ref / P_signal) equals snr_db."""
    sig = signal.samples.astype(np.float64)
    ref = reference.samples.astype(np.float64)
    p_sig = float(np.mean(sig**2))
    p_ref = float(np.mean(ref**2))
    if p_sig <= 0.0 or p_ref <= 0.0:
        raise InvalidInputError("scale_to_snr requires nonzero-energy signals")
    alpha = np.sqrt(p_ref / (p_sig * 10.0 ** (snr_db / 10.0)))
    return Waveform((sig * alpha).astype(np.float32), signal.sample_rate)


def convolve_rir(signal: Waveform, rir: Waveform) -> Waveform:
    """Full convolution truncated to the input length, renormalized to its RMS."""
    if len(rir) == 0:
        raise InvalidInputError("empty room impulse response")
    if len(rir) > len(signal):
        raise InvalidInputError(
            f"RIR ({len(rir)} samples) longer than signal ({len(signal)} samples)"
        )
    x = signal.samples.astype(np.float64)
    h = rir.samples.astype(np.float64)
    rms_in = np.sqrt(np.mean(x**2))
    if rms_in <= 0.0 or not np.any(h):
        raise InvalidInputError("convolve_rir requires nonzero-energy inputs")
    out = scipy.signal.fftconvolve(x, h)[: len(x)]
    rms_out = np.sqrt(np.mean(out**2))
    out *= rms_in / max(rms_out, 1e-30)
    return Waveform(out.astype(np.float32), signal.sample_rate)


def _fit_length(x: np.ndarray, n: int, rng) -> np.ndarray:
    """Random crop when longer than n, loop when shorter."""
    if len(x) == n:
        return x
    if len(x) > n:
        offset = int(rng.integers(0, len(x) - n + 1))
        return x[offset : offset + n]
    reps = int(np.ceil(n / len(x)))
    return np.tile(x, reps)[:n]


# ---------------------------------------------------------------------------
# catalogs


class Catalog:
    """Source material for mixing: speakers, noise, room impulse responses."""

    sample_rate: int

    def speaker_ids(self) -> list:
        raise NotImplementedError

    def rir_ids(self) -> list:
        raise NotImplementedError

    def has_noise_source(self) -> bool:
        raise NotImplementedError

    def utterance(self, speaker_id: str, seed: int) -> Waveform:
        raise NotImplementedError

    def utterance_pair(self, speaker_id: str, seed: int):
        """(clean, reference): two distinct utterances of one speaker."""
        raise NotImplementedError

    def pair_labels(self, speaker_id: str, seed: int):
        """Token labels of the clean half of utterance_pair, or None."""
        return None

    def noise_clip(self, seed: int) -> Waveform:
        raise NotImplementedError

    def rir(self, rir_id: str) -> Waveform:
        raise NotImplementedError

    def validate(self, need_rir: bool = False) -> None:
        if len(self.speaker_ids()) < 2:
            raise ConfigError("catalog needs at least 2 speakers")
        if not self.has_noise_source():
            raise ConfigError("catalog needs at least one noise source")
        if need_rir and not self.rir_ids():
            raise ConfigError("catalog has no room impulse responses")


def default_speaker_bank(n_speakers: int = 8, sample_rate: int = 16000) -> list:
    """Evenly laid out band-limited speakers with 100 Hz guard gaps."""
    if n_speakers < 1:
        raise ConfigError("need at least one speaker")
    specs = []
    for i in range(n_speakers):
        lo = 350.0 + 840.0 * i
        hi = lo + 800.0
        if hi >= sample_rate / 2:
            raise ConfigError(f"speaker {i} band {lo}-{hi} exceeds Nyquist")
        specs.append(
            SyntheticSpeakerSpec(
                speaker_id=f"spk{i}",
                carrier_band=(lo, hi),
                modulation_rate=2.5 + 0.7 * i,
                harmonic_count=3,
            )
        )
    return specs


class SyntheticCatalog(Catalog):
    """Fully procedural catalog: no audio files needed."""

    def __init__(
        self,
        speakers=None,
        sample_rate: int = 16000,
        utterance_tokens: int = 8,
        noise_bands=((40.0, 250.0), (7200.0, 7900.0)),
        n_rirs: int = 2,
        rir_seed: int = 7712,
    ):
        self.speakers = list(speakers) if speakers is not None else default_speaker_bank()
        self.sample_rate = sample_rate
        self.n_tokens = int(utterance_tokens)
        self.noise_bands = tuple(tuple(b) for b in noise_bands)
        self.n_rirs = int(n_rirs)
        self.rir_seed = int(rir_seed)
        self._by_id = {s.speaker_id: s for s in self.speakers}
        if len(self._by_id) != len(self.speakers):
            raise ConfigError("duplicate speaker ids in catalog")

    @property
    def utterance_samples(self) -> int:
        return self.n_tokens * TOKEN_SAMPLES

    def speaker_ids(self):
        return [s.speaker_id for s in self.speakers]

    def rir_ids(self):
        return [f"rir{i}" for i in range(self.n_rirs)]

    def has_noise_source(self) -> bool:
        return True

    def spec(self, speaker_id: str) -> SyntheticSpeakerSpec:
        if speaker_id not in self._by_id:
            raise ConfigError(f"unknown speaker {speaker_id!r}")
        return self._by_id[speaker_id]

    def utterance(self, speaker_id: str, seed: int) -> Waveform:
        duration = self.utterance_samples / self.sample_rate
        return synth_speaker_utterance(self.spec(speaker_id), duration, seed, self.sample_rate)

    def utterance_pair(self, speaker_id: str, seed: int):
        clean = self.utterance(speaker_id, child_seed(seed, _S_PAIR_CLEAN))
        ref = self.utterance(speaker_id, child_seed(seed, _S_PAIR_REF))
        return clean, ref

    def pair_labels(self, speaker_id: str, seed: int):
        return utterance_tokens(child_seed(seed, _S_PAIR_CLEAN), self.n_tokens)

    def noise_clip(self, seed: int) -> Waveform:
        rng = _rng(seed)
        noise = _band_noise(rng, self.utterance_samples, self.sample_rate, self.noise_bands)
        noise *= 0.5 / max(np.max(np.abs(noise)), 1e-12)
        return Waveform(noise.astype(np.float32), self.sample_rate)

    def rir(self, rir_id: str) -> Waveform:
        if rir_id not in self.rir_ids():
            raise ConfigError(f"unknown RIR {rir_id!r}")
        index = int(rir_id[3:])
        return synth_rir(child_seed(self.rir_seed, index), self.sample_rate)


class FileCatalog(Catalog):
    """Catalog backed by WAV files listed in a JSONL manifest.

    Manifest lines:
      {"role": "target", "speaker": "<id>", "path": "<wav>"}
      {"role": "noise", "path": "<wav>"}
      {"role": "rir", "path": "<wav>", "id": "<optional id>"}
    Paths are resolved relative to the manifest location.
    """

    def __init__(self, manifest_path):
        manifest_path = Path(manifest_path)
        base = manifest_path.parent
        self._speakers: dict = {}
        self._noise: list = []
        self._rirs: dict = {}
        rir_count = 0
        with open(manifest_path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    entry = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ConfigError(f"{manifest_path}:{line_no}: bad JSON: {exc}") from exc
                role = entry.get("role")
                path = base / entry.get("path", "")
                if role == "target":
                    self._speakers.setdefault(str(entry["speaker"]), []).append(path)
                elif role == "noise":
                    self._noise.append(path)
                elif role == "rir":
                    rid = str(entry.get("id", f"rir{rir_count}"))
                    rir_count += 1
                    self._rirs[rid] = path
                else:
                    raise ConfigError(f"{manifest_path}:{line_no}: unknown role {role!r}")
        if not self._speakers:
            raise ConfigError(f"{manifest_path}: no target entries")
        for sid, files in self._speakers.items():
            if len(files) < 2:
                raise ConfigError(f"speaker {sid!r} needs at least 2 utterance files")
        rates = {wav_read(next(iter(self._speakers.values()))[0]).sample_rate}
        self.sample_rate = rates.pop()
        self._cache: dict = {}

    def _read(self, path) -> Waveform:
        key = str(path)
        if key not in self._cache:
            w = wav_read(path)
            if w.sample_rate != self.sample_rate:
                raise ConfigError(
                    f"{path}: sample rate {w.sample_rate} != catalog rate {self.sample_rate}"
                )
            self._cache[key] = w
        return self._cache[key]

    def speaker_ids(self):
        return sorted(self._speakers)

    def rir_ids(self):
        return sorted(self._rirs)

    def has_noise_source(self) -> bool:
        return bool(self._noise)

    def utterance(self, speaker_id: str, seed: int) -> Waveform:
        files = self._speakers.get(speaker_id)
        if not files:
            raise ConfigError(f"unknown speaker {speaker_id!r}")
        rng = _rng(seed)
        return self._read(files[int(rng.integers(len(files)))])

    def utterance_pair(self, speaker_id: str, seed: int):
        files = self._speakers.get(speaker_id)
        if not files:
            raise ConfigError(f"unknown speaker {speaker_id!r}")
        rng = _rng(seed)
        first, second = rng.choice(len(files), size=2, replace=False)
        return self._read(files[int(first)]), self._read(files[int(second)])

    def noise_clip(self, seed: int) -> Waveform:
        if not self._noise:
            raise ConfigError("catalog has no noise files")
        rng = _rng(seed)
        return self._read(self._noise[int(rng.integers(len(self._noise)))])

    def rir(self, rir_id: str) -> Waveform:
        if rir_id not in self._rirs:
            raise ConfigError(f"unknown RIR {rir_id!r}")
        return self._read(self._rirs[rir_id])


# ---------------------------------------------------------------------------
# recipe drawing and realization


def _draw_target(seed: int, speaker_ids: list) -> str:
    rng = _rng(seed, _S_CAST)
    return speaker_ids[int(rng.integers(len(speaker_ids)))]


def _draw_interferers(seed: int, speaker_ids: list, target_id: str, n_interferers: int):
    """Interferer identities; deterministic in (seed, catalog, target), never the target."""
    others = [s for s in speaker_ids if s != target_id]
    rng = _rng(seed, _S_CAST, 1)
    replace = n_interferers > len(others)
    picks = rng.choice(len(others), size=n_interferers, replace=replace)
    return tuple(others[int(i)] for i in picks)


def draw_recipe(rng_seed: int, catalog: Catalog) -> MixtureRecipe:
    """Deterministic recipe draw per the documented probabilities.

    0-3 interferers (uniform), ambient noise with probability 0.8, a room
    impulse response with probability 0.3 (when the catalog has RIRs), all
    SNRs uniform in [1, 20] dB against the clean target.
    """
    catalog.validate()
    rng = _rng(rng_seed, _S_RECIPE)
    n_interferers = int(rng.integers(0, MAX_INTERFERERS + 1))
    snrs = tuple(float(x) for x in rng.uniform(SNR_LOW_DB, SNR_HIGH_DB, size=n_interferers))
    has_noise = bool(rng.random() < P_NOISE)
    noise_snr = float(rng.uniform(SNR_LOW_DB, SNR_HIGH_DB))
    rir_ids = catalog.rir_ids()
    has_rir = bool(rng.random() < P_RIR) and bool(rir_ids)
    rir_id = rir_ids[int(rng.integers(len(rir_ids)))] if has_rir else None
    target = _draw_target(rng_seed, catalog.speaker_ids())
    return MixtureRecipe(
        seed=int(rng_seed),
        target_id=target,
        n_interferers=n_interferers,
        interferer_snrs_db=snrs,
        has_noise=has_noise,
        noise_snr_db=noise_snr,
        has_rir=has_rir,
        rir_id=rir_id,
    )


def realize(recipe: MixtureRecipe, catalog: Catalog) -> MixtureExample:
    """Render a recipe into waveforms. Pure function of (recipe, catalog)."""
    ids = catalog.speaker_ids()
    if recipe.target_id not in ids:
        raise ConfigError(f"recipe target {recipe.target_id!r} not in catalog")
    if recipe.has_rir and recipe.rir_id not in catalog.rir_ids():
        raise ConfigError(f"recipe RIR {recipe.rir_id!r} not in catalog")

    render = _rng(recipe.seed, _S_RENDER)
    pair_seed = child_seed(recipe.seed, _S_RENDER, 0)
    clean, reference = catalog.utterance_pair(recipe.target_id, pair_seed)
    n = len(clean)

    target_contribution = clean
    if recipe.has_rir:
        target_contribution = convolve_rir(clean, catalog.rir(recipe.rir_id))
    mix = target_contribution.samples.astype(np.float64)

    interferer_ids = _draw_interferers(recipe.seed, ids, recipe.target_id, recipe.n_interferers)
    for j, sid in enumerate(interferer_ids):
        utt = catalog.utterance(sid, child_seed(recipe.seed, _S_RENDER, 1, j))
        fitted = Waveform(
            _fit_length(utt.samples, n, render).astype(np.float32), utt.sample_rate
        )
        mix += scale_to_snr(fitted, clean, recipe.interferer_snrs_db[j]).samples.astype(np.float64)

    if recipe.has_noise:
        clip = catalog.noise_clip(child_seed(recipe.seed, _S_RENDER, 2))
        fitted = Waveform(
            _fit_length(clip.samples, n, render).astype(np.float32), clip.sample_rate
        )
        mix += scale_to_snr(fitted, clean, recipe.noise_snr_db).samples.astype(np.float64)

    peak = float(np.max(np.abs(mix))) if mix.size else 0.0
    if peak > 1.0:
        mix = mix / peak
    noisy = Waveform(np.clip(mix, -1.0, 1.0).astype(np.float32), clean.sample_rate)
    return MixtureExample(noisy, clean, reference, recipe)


def clean_token_labels(recipe: MixtureRecipe, catalog: Catalog):
    """Token labels of the clean target utterance, when the catalog knows them."""
    return catalog.pair_labels(recipe.target_id, child_seed(recipe.seed, _S_RENDER, 0))


# ---------------------------------------------------------------------------
# corpus generation and disk layout


@dataclass(frozen=True)
class CorpusItem:
    item_id: str
    example: MixtureExample
    tokens: tuple | None


def generate_corpus(catalog: Catalog, n_examples: int, master_seed: int) -> list:
    """n seeded examples; per-example seeds derive from (master_seed, index)."""
    items = []
    for i in range(n_examples):
        seed = child_seed(master_seed, i)
        recipe = draw_recipe(seed, catalog)
        example = realize(recipe, catalog)
        items.append(
            CorpusItem(
                item_id=f"ex{i:05d}",
                example=example,
                tokens=clean_token_labels(recipe, catalog),
            )
        )
    return items


def clean_corpus(catalog: Catalog, per_speaker: int, master_seed: int) -> list:
    """Noise-free items (noisy == clean) covering every catalog speaker.

    This is the recognizer's pretraining diet: a classifier trained here has
    seen every speaker's token inventory on clean audio.
    """
    items = []
    for si, speaker in enumerate(catalog.speaker_ids()):
        for j in range(per_speaker):
            seed = child_seed(master_seed, si, j)
            recipe = MixtureRecipe(
                seed=seed,
                target_id=speaker,
                n_interferers=0,
                interferer_snrs_db=(),
                has_noise=False,
                noise_snr_db=SNR_LOW_DB,
                has_rir=False,
                rir_id=None,
            )
            pair_seed = child_seed(seed, _S_RENDER, 0)
            clean, reference = catalog.utterance_pair(speaker, pair_seed)
            items.append(
                CorpusItem(
                    item_id=f"clean_{speaker}_{j}",
                    example=MixtureExample(clean, clean, reference, recipe),
                    tokens=catalog.pair_labels(speaker, pair_seed),
                )
            )
    return items


def write_corpus(items, out_dir) -> None:
    """WAV triples per item plus manifest.jsonl and recipes.jsonl."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as man, open(
        out / "recipes.jsonl", "w", encoding="utf-8"
    ) as rec:
        for item in items:
            names = {
                "noisy": f"{item.item_id}.noisy.wav",
                "clean": f"{item.item_id}.clean.wav",
                "reference": f"{item.item_id}.ref.wav",
            }
            wav_write(out / names["noisy"], item.example.noisy)
            wav_write(out / names["clean"], item.example.clean_target)
            wav_write(out / names["reference"], item.example.reference_utterance)
            man.write(
                json.dumps(
                    {
                        "item": item.item_id,
                        **names,
                        "tokens": list(item.tokens) if item.tokens is not None else None,
                    }
                )
                + "\n"
            )
            rec.write(
                json.dumps({"item": item.item_id, "recipe": item.example.recipe.to_dict()}) + "\n"
            )


def load_corpus(corpus_dir) -> list:
    """Read back a corpus written by write_corpus."""
    base = Path(corpus_dir)
    recipes = {}
    recipes_path = base / "recipes.jsonl"
    if recipes_path.exists():
        with open(recipes_path, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    entry = json.loads(line)
                    recipes[entry["item"]] = MixtureRecipe.from_dict(entry["recipe"])
    items = []
    manifest = base / "manifest.jsonl"
    if not manifest.exists():
        raise InvalidInputError(f"{base}: no manifest.jsonl")
    with open(manifest, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            entry = json.loads(line)
            item_id = entry["item"]
            if item_id not in recipes:
                raise InvalidInputError(f"{base}: item {item_id} missing from recipes.jsonl")
            example = MixtureExample(
                noisy=wav_read(base / entry["noisy"]),
                clean_target=wav_read(base / entry["clean"]),
                reference_utterance=wav_read(base / entry["reference"]),
                recipe=recipes[item_id],
            )
            tokens = entry.get("tokens")
            items.append(
                CorpusItem(
                    item_id=item_id,
                    example=example,
                    tokens=tuple(tokens) if tokens is not None else None,
                )
            )
    return items
