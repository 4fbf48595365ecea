"""Chunk-merge training: enhancement loss, gated recognizer branch, Adam loop.

A long input splits into fixed-size chunks (default 5 s), each chunk is
enhanced independently, and the merged full-length output carries the
utterance-level losses. During joint tuning the recognizer branch reads
the enhanced audio only when -si_snr(output, clean) clears the threshold
(default -8, i.e. SI-SNR better than 8 dB); otherwise it reads the clean
audio, which by construction sends no recognizer gradient into the
enhancer. The gate always evaluates SI-SNR, independent of the chosen
enhancement loss variant.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import diffdsp, dsp, masknet, metrics
from .audio import Waveform
from .autodiff import Parameter, Tensor
from .checkpoint import f32_representable, load_container, save_container
from .errors import ConfigError, FormatError, InvalidInputError, NumericError
from .speaker import FusionParams, encode, fuse, fuse_graph, init_fusion

# rng stream keys
_S_INIT_MASK = 11
_S_INIT_FUSION = 12
_S_INIT_ASR = 13
_S_SAMPLE = 14
_S_DROPOUT = 15
_S_ABSENT = 16


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *keys])))


# ---------------------------------------------------------------------------
# chunking


@dataclass(frozen=True)
class ChunkPlan:
    chunk_size_s: float
    chunk_samples: int
    n_chunks: int
    pad_samples: int


def split_chunks(w: Waveform, chunk_size_s: float = 5.0):
    """Zero-pad to an integer multiple of the chunk size and split evenly."""
    if len(w) == 0:
        raise InvalidInputError("cannot chunk an empty waveform")
    if chunk_size_s <= 0:
        raise InvalidInputError(f"chunk size must be positive, got {chunk_size_s}")
    chunk_samples = int(round(chunk_size_s * w.sample_rate))
    if chunk_samples < 1:
        raise InvalidInputError("chunk size is below one sample")
    n_chunks = int(np.ceil(len(w) / chunk_samples))
    pad = n_chunks * chunk_samples - len(w)
    padded = np.concatenate([w.samples, np.zeros(pad, dtype=np.float32)])
    chunks = [
        Waveform(padded[i * chunk_samples : (i + 1) * chunk_samples], w.sample_rate)
        for i in range(n_chunks)
    ]
    return chunks, ChunkPlan(chunk_size_s, chunk_samples, n_chunks, pad)


def merge_chunks(chunks, plan: ChunkPlan) -> Waveform:
    """Concatenate equal-size chunks and trim the padding recorded in the plan."""
    if len(chunks) != plan.n_chunks:
        raise InvalidInputError(f"expected {plan.n_chunks} chunks, got {len(chunks)}")
    for i, ch in enumerate(chunks):
        if len(ch) != plan.chunk_samples:
            raise InvalidInputError(
                f"chunk {i} has {len(ch)} samples, expected {plan.chunk_samples}"
            )
    merged = np.concatenate([ch.samples for ch in chunks])
    if plan.pad_samples:
        merged = merged[: -plan.pad_samples]
    return Waveform(merged, chunks[0].sample_rate)


# ---------------------------------------------------------------------------
# toy recognizer


@dataclass(frozen=True)
class ToyAsrConfig:
    vocab: int = 8
    window_frames: int = 32
    n_fft: int = 512
    hop: int = 128


class ToyAsrParams:
    """Affine classifier over mean-pooled spectrogram windows."""

    def __init__(self, config: ToyAsrConfig, tensors: dict):
        self.config = config
        self.tensors = tensors

    def zero_grad(self):
        for p in self.tensors.values():
            p.zero_grad()

    def parameters(self):
        return list(self.tensors.values())

    def named(self):
        return self.tensors.items()


def init_toy_asr(cfg: ToyAsrConfig, seed: int) -> ToyAsrParams:
    rng = _rng(seed, _S_INIT_ASR)
    n_bins = cfg.n_fft // 2 + 1
    lim = 1.0 / np.sqrt(n_bins)
    tensors = {
        "w": Parameter(f32_representable(rng.uniform(-lim, lim, size=(n_bins, cfg.vocab)))),
        "b": Parameter(np.zeros(cfg.vocab)),
    }
    return ToyAsrParams(cfg, tensors)


def _as_magnitude(audio, cfg: ToyAsrConfig):
    if isinstance(audio, Tensor):
        return audio
    if isinstance(audio, Waveform):
        return Tensor(dsp.stft(audio, cfg.n_fft, cfg.hop).magnitude)
    if isinstance(audio, dsp.Stft):
        return Tensor(audio.magnitude)
    return Tensor(np.asarray(audio, dtype=np.float64))


def toy_asr_forward(audio, p: ToyAsrParams) -> Tensor:
    """Window-pooled token logits, differentiable through the audio input."""
    cfg = p.config
    mag = _as_magnitude(audio, cfg)
    n_frames = mag.shape[0]
    n_windows = n_frames // cfg.window_frames
    if n_windows < 1:
        raise InvalidInputError(
            f"need at least {cfg.window_frames} frames for one token window, got {n_frames}"
        )
    used = mag[: n_windows * cfg.window_frames, :]
    pooled = used.reshape(n_windows, cfg.window_frames, mag.shape[1]).mean(axis=1)
    return pooled @ ad.param_tensor(p.tensors["w"]) + ad.param_tensor(p.tensors["b"])


def toy_asr_loss(audio, labels, p: ToyAsrParams) -> Tensor:
    """Mean token cross-entropy; label count must match the window count."""
    logits = toy_asr_forward(audio, p)
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape[0] != logits.shape[0]:
        raise InvalidInputError(
            f"{labels.shape[0]} labels for {logits.shape[0]} token windows"
        )
    return diffdsp.cross_entropy_graph(logits, labels)


def toy_asr_decode(audio, p: ToyAsrParams) -> np.ndarray:
    with ad.no_grad():
        logits = toy_asr_forward(audio, p)
    return np.argmax(logits.value, axis=1)


# ---------------------------------------------------------------------------
# configuration and model bundle


@dataclass(frozen=True)
class TrainConfig:
    threshold_db: float = -8.0
    learning_rate: float = 1e-3
    steps: int = 200
    batch_size: int = 4
    seed: int = 0
    loss_variant: str = "si_snr"
    joint: bool = False
    chunk_size_s: float = 5.0
    absent_target_rate: float = 0.0
    cross_extraction: bool = True

    def __post_init__(self):
        if not np.isfinite(self.threshold_db):
            raise ConfigError("threshold_db must be finite")
        if self.loss_variant not in ("si_snr", "mse"):
            raise ConfigError(f"unknown loss_variant {self.loss_variant!r}")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if not 0.0 <= self.absent_target_rate < 1.0:
            raise ConfigError("absent_target_rate must be in [0, 1)")
        if self.joint and self.absent_target_rate > 0.0:
            raise ConfigError("absent-target examples are an enhancement-only training device")
        if self.chunk_size_s <= 0:
            raise ConfigError("chunk_size_s must be positive")


@dataclass
class ModelBundle:
    mask: masknet.MaskNetParams
    fusion: FusionParams
    asr: ToyAsrParams | None = None
    hop: int = 128

    def zero_grad(self):
        self.mask.zero_grad()
        self.fusion.zero_grad()
        if self.asr is not None:
            self.asr.zero_grad()

    def parameters(self):
        out = self.mask.parameters() + self.fusion.parameters()
        if self.asr is not None:
            out += self.asr.parameters()
        return out

    def save(self, path) -> None:
        config = {
            "kind": "bundle",
            "pipeline": {"hop": self.hop},
            "masknet": asdict(self.mask.config),
            "fusion": {
                "d_emb": self.fusion.d_emb,
                "cross_extraction": self.fusion.cross_extraction,
            },
            "asr": asdict(self.asr.config) if self.asr is not None else None,
        }
        tensors = {f"mask.{k}": v.value for k, v in self.mask.named()}
        tensors.update({f"fusion.{k}": v.value for k, v in self.fusion.named()})
        if self.asr is not None:
            tensors.update({f"asr.{k}": v.value for k, v in self.asr.named()})
        save_container(path, config, tensors)

    @classmethod
    def load(cls, path) -> "ModelBundle":
        config, tensors = load_container(path)
        if config.get("kind") != "bundle":
            raise FormatError(f"not a model bundle checkpoint: kind={config.get('kind')!r}")
        net_cfg = masknet.MaskNetConfig(**config["masknet"])
        reference = masknet.init_params(net_cfg, seed=0)
        mask_tensors = {}
        for name, ref_param in reference.named():
            key = f"mask.{name}"
            if key not in tensors:
                raise FormatError(f"checkpoint missing tensor {key!r}")
            if tensors[key].shape != ref_param.value.shape:
                raise FormatError(f"tensor {key!r} has unexpected shape {tensors[key].shape}")
            mask_tensors[name] = Parameter(tensors[key])
        fusion_cfg = config["fusion"]
        fusion = FusionParams(
            d_emb=int(fusion_cfg["d_emb"]),
            tensors={
                k: Parameter(tensors[f"fusion.{k}"]) for k in ("w1", "b1", "w2", "b2")
            },
            cross_extraction=bool(fusion_cfg["cross_extraction"]),
        )
        asr = None
        if config.get("asr") is not None:
            asr_cfg = ToyAsrConfig(**config["asr"])
            asr = ToyAsrParams(
                asr_cfg, {k: Parameter(tensors[f"asr.{k}"]) for k in ("w", "b")}
            )
        return cls(
            mask=masknet.MaskNetParams(net_cfg, mask_tensors),
            fusion=fusion,
            asr=asr,
            hop=int(config["pipeline"]["hop"]),
        )


def init_bundle(
    net_cfg: masknet.MaskNetConfig,
    seed: int,
    *,
    hop: int = 128,
    cross_extraction: bool = True,
    with_asr: bool = False,
    asr_cfg: ToyAsrConfig | None = None,
) -> ModelBundle:
    asr = None
    if with_asr:
        asr_cfg = asr_cfg or ToyAsrConfig(n_fft=net_cfg.n_fft, hop=hop)
        asr = init_toy_asr(asr_cfg, child(seed, _S_INIT_ASR))
    return ModelBundle(
        mask=masknet.init_params(net_cfg, child(seed, _S_INIT_MASK)),
        fusion=init_fusion(net_cfg.d_emb, child(seed, _S_INIT_FUSION), cross_extraction),
        asr=asr,
        hop=hop,
    )


def child(seed: int, key: int) -> int:
    return int(np.random.SeedSequence([int(seed), key]).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adaptive moment estimation; updates stay float32-representable."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad**2
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.value = f32_representable(p.value - self.lr * update)


# ---------------------------------------------------------------------------
# the forward graph for one example


@dataclass
class StepOutcome:
    total: Tensor
    enh_loss: float
    asr_loss: float | None
    gate_enhanced: bool | None
    si_snr_db: float


def _embedding_graph(models: ModelBundle, reference: Waveform, noisy: Waveform, cache=None):
    d_emb = models.fusion.d_emb
    if cache is not None:
        e_ref = cache.setdefault(("ref", id(reference)), encode(reference, d_emb))
        e_noisy = cache.setdefault(("noisy", id(noisy)), encode(noisy, d_emb))
    else:
        e_ref = encode(reference, d_emb)
        e_noisy = encode(noisy, d_emb)
    return fuse_graph(Tensor(e_ref.values), Tensor(e_noisy.values), models.fusion)


def _enhance_graph(models, noisy: Waveform, e_t: Tensor, cfg: TrainConfig, training, rng):
    """Split -> mask -> istft -> merge, all differentiable. Returns (merged, chunk mags)."""
    net_cfg = models.mask.config
    chunks, plan = split_chunks(noisy, cfg.chunk_size_s)
    outs = []
    chunk_specs = []
    for ch in chunks:
        s = dsp.stft(ch, net_cfg.n_fft, models.hop)
        feats = masknet.build_features_graph(s.magnitude, e_t)
        mask_t = masknet.forward_graph(feats, models.mask, training=training, rng=rng)
        enh_mag = mask_t * Tensor(s.magnitude)
        outs.append(diffdsp.istft_graph(enh_mag, s.phase, net_cfg.n_fft, models.hop, len(ch)))
        chunk_specs.append(enh_mag)
    merged = outs[0] if len(outs) == 1 else ad.concat(outs)
    merged = merged[: len(noisy)]
    return merged, chunk_specs, plan


def _build_step(
    item,
    models: ModelBundle,
    cfg: TrainConfig,
    *,
    training: bool,
    rng=None,
    emb_cache=None,
    absent_reference: Waveform | None = None,
) -> StepOutcome:
    ex = item.example
    reference = absent_reference if absent_reference is not None else ex.reference_utterance
    e_t = _embedding_graph(models, reference, ex.noisy, emb_cache)
    merged, chunk_mags, _ = _enhance_graph(models, ex.noisy, e_t, cfg, training, rng)

    clean64 = ex.clean_target.samples.astype(np.float64)
    si_value = metrics.si_snr_arrays(merged.value.copy(), clean64)

    if absent_reference is not None:
        enh_loss_t = diffdsp.suppression_db_graph(merged, ex.noisy.samples.astype(np.float64))
    elif cfg.loss_variant == "si_snr":
        enh_loss_t = -diffdsp.si_snr_graph(merged, clean64)
    else:
        net_cfg = models.mask.config
        clean_chunks, _ = split_chunks(ex.clean_target, cfg.chunk_size_s)
        terms = [
            diffdsp.mse_graph(mag, dsp.stft(cc, net_cfg.n_fft, models.hop).magnitude)
            for mag, cc in zip(chunk_mags, clean_chunks)
        ]
        total_mse = terms[0]
        for term in terms[1:]:
            total_mse = total_mse + term
        enh_loss_t = total_mse * (1.0 / len(terms))

    asr_loss_val = None
    gate_enhanced = None
    total = enh_loss_t
    if cfg.joint:
        if models.asr is None:
            raise ConfigError("joint training requires a recognizer in the bundle")
        if item.tokens is None:
            raise InvalidInputError(f"item {item.item_id} has no token labels for joint training")
        gate_enhanced = bool(-si_value < cfg.threshold_db)
        asr_cfg = models.asr.config
        if gate_enhanced:
            asr_input = diffdsp.stft_mag_graph(merged, asr_cfg.n_fft, asr_cfg.hop)
        else:
            asr_input = Tensor(dsp.stft(ex.clean_target, asr_cfg.n_fft, asr_cfg.hop).magnitude)
        asr_loss_t = toy_asr_loss(asr_input, item.tokens, models.asr)
        asr_loss_val = float(asr_loss_t.value)
        total = enh_loss_t + asr_loss_t

    return StepOutcome(
        total=total,
        enh_loss=float(enh_loss_t.value),
        asr_loss=asr_loss_val,
        gate_enhanced=gate_enhanced,
        si_snr_db=si_value,
    )


def joint_step(item, models: ModelBundle, cfg: TrainConfig) -> StepOutcome:
    """One example's loss with every gradient slot filled (grads are zeroed first)."""
    models.zero_grad()
    rng = _rng(cfg.seed, _S_DROPOUT)
    outcome = _build_step(item, models, cfg, training=True, rng=rng)
    if not np.isfinite(outcome.total.value):
        raise NumericError("loss is non-finite")
    ad.backward(outcome.total)
    return outcome


# ---------------------------------------------------------------------------
# training loops


def train(
    corpus,
    cfg: TrainConfig,
    net_cfg: masknet.MaskNetConfig | None = None,
    models: ModelBundle | None = None,
    log_path=None,
    checkpoint_path=None,
):
    """Deterministic seeded training; returns (models, per-step records).

    Pass `models` to fine-tune an existing bundle (e.g. joint tuning from a
    cascade-trained enhancer); otherwise a fresh bundle is built from
    net_cfg and cfg.seed.
    """
    corpus = list(corpus)
    if not corpus:
        raise InvalidInputError("empty corpus")
    if models is None:
        if net_cfg is None:
            raise ConfigError("train() needs net_cfg when no models are given")
        models = init_bundle(
            net_cfg,
            cfg.seed,
            cross_extraction=cfg.cross_extraction,
            with_asr=cfg.joint,
        )
    if cfg.joint and models.asr is None:
        raise ConfigError("joint training requires a bundle with a recognizer")

    sample_rng = _rng(cfg.seed, _S_SAMPLE)
    dropout_rng = _rng(cfg.seed, _S_DROPOUT)
    absent_rng = _rng(cfg.seed, _S_ABSENT)
    optimizer = Adam(models.parameters(), lr=cfg.learning_rate)
    emb_cache: dict = {}
    records = []

    for step in range(cfg.steps):
        started = time.perf_counter()
        models.zero_grad()
        enh_losses, asr_losses, gates = [], [], []
        for _ in range(cfg.batch_size):
            item = corpus[int(sample_rng.integers(len(corpus)))]
            absent_reference = None
            if cfg.absent_target_rate > 0.0 and absent_rng.random() < cfg.absent_target_rate:
                others = [
                    c for c in corpus if c.example.recipe.target_id != item.example.recipe.target_id
                ]
                if others:
                    donor = others[int(absent_rng.integers(len(others)))]
                    absent_reference = donor.example.reference_utterance
            try:
                outcome = _build_step(
                    item,
                    models,
                    cfg,
                    training=True,
                    rng=dropout_rng,
                    emb_cache=emb_cache,
                    absent_reference=absent_reference,
                )
            except NumericError as exc:
                raise NumericError(f"step {step}: {exc}") from exc
            if not np.isfinite(outcome.total.value):
                raise NumericError(
                    f"step {step}: loss diverged "
                    f"(enh={outcome.enh_loss}, asr={outcome.asr_loss})"
                )
            ad.backward(outcome.total, seed=np.float64(1.0 / cfg.batch_size))
            enh_losses.append(outcome.enh_loss)
            if outcome.asr_loss is not None:
                asr_losses.append(outcome.asr_loss)
            if outcome.gate_enhanced is not None:
                gates.append(outcome.gate_enhanced)
        optimizer.step()
        records.append(
            {
                "step": step,
                "enh_loss": float(np.mean(enh_losses)),
                "asr_loss": float(np.mean(asr_losses)) if asr_losses else None,
                "gate_state": float(np.mean(gates)) if gates else None,
                "wall_ms": (time.perf_counter() - started) * 1000.0,
            }
        )

    if log_path is not None:
        write_metrics_log(records, log_path)
    if checkpoint_path is not None:
        models.save(checkpoint_path)
    return models, records


def write_metrics_log(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def train_toy_asr(corpus, asr: ToyAsrParams, steps: int, learning_rate: float, seed: int):
    """Train the recognizer alone on clean utterances (the cascade recipe)."""
    corpus = [c for c in corpus if c.tokens is not None]
    if not corpus:
        raise InvalidInputError("no labelled items in corpus")
    rng = _rng(seed, _S_SAMPLE)
    optimizer = Adam(asr.parameters(), lr=learning_rate)
    mags = {
        c.item_id: dsp.stft(c.example.clean_target, asr.config.n_fft, asr.config.hop).magnitude
        for c in corpus
    }
    for step in range(steps):
        asr.zero_grad()
        item = corpus[int(rng.integers(len(corpus)))]
        loss = toy_asr_loss(Tensor(mags[item.item_id]), item.tokens, asr)
        if not np.isfinite(loss.value):
            raise NumericError(f"recognizer training diverged at step {step}")
        ad.backward(loss)
        optimizer.step()
    return asr


# ---------------------------------------------------------------------------
# inference and evaluation


def enhance_waveform(
    noisy: Waveform, reference: Waveform, models: ModelBundle, chunk_size_s: float = 5.0
) -> Waveform:
    """encode -> fuse -> chunked mask/istft -> merge; output length == input length."""
    d_emb = models.fusion.d_emb
    e = fuse(encode(reference, d_emb), encode(noisy, d_emb), models.fusion)
    net_cfg = models.mask.config
    chunks, plan = split_chunks(noisy, chunk_size_s)
    enhanced = []
    for ch in chunks:
        s = dsp.stft(ch, net_cfg.n_fft, models.hop)
        mask = masknet.forward(masknet.build_features(s, e), models.mask)
        enhanced.append(dsp.istft(dsp.apply_mask(s, mask), ch.sample_rate))
    return merge_chunks(enhanced, plan)


def evaluate_enhancement(models: ModelBundle, items, chunk_size_s: float = 5.0):
    """(enhanced report, unprocessed baseline report) over a corpus."""
    enhanced_rows, baseline_rows = [], []
    for item in items:
        ex = item.example
        out = enhance_waveform(ex.noisy, ex.reference_utterance, models, chunk_size_s)
        enhanced_rows.append(
            (item.item_id, metrics.si_snr(out, ex.clean_target), metrics.sdr(out, ex.clean_target))
        )
        baseline_rows.append(
            (
                item.item_id,
                metrics.si_snr(ex.noisy, ex.clean_target),
                metrics.sdr(ex.noisy, ex.clean_target),
            )
        )
    return metrics.ScoreReport.from_items(enhanced_rows), metrics.ScoreReport.from_items(
        baseline_rows
    )


def token_error_rate(models: ModelBundle, items, chunk_size_s: float = 5.0) -> float:
    """Fraction of wrongly decoded tokens over enhanced eval audio."""
    if models.asr is None:
        raise ConfigError("bundle has no recognizer")
    errors = 0
    total = 0
    for item in items:
        if item.tokens is None:
            continue
        ex = item.example
        out = enhance_waveform(ex.noisy, ex.reference_utterance, models, chunk_size_s)
        decoded = toy_asr_decode(out, models.asr)
        labels = np.asarray(item.tokens, dtype=np.intp)
        n = min(len(decoded), len(labels))
        errors += int(np.sum(decoded[:n] != labels[:n])) + abs(len(decoded) - len(labels))
        total += max(len(decoded), len(labels))
    if total == 0:
        raise InvalidInputError("no labelled items to score")
    return errors / total
