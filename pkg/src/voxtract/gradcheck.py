"""Finite-difference verification of every analytic gradient.

Each suite builds a tiny model, compares the backward pass against
central differences for every parameter entry, and reports the worst
relative error. The harness is also the implementation behind the
`gradcheck` CLI command.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import diffdsp, joint, masknet
from .audio import Waveform
from .autodiff import Parameter, Tensor
from .mixer import CorpusItem, MixtureExample, MixtureRecipe
from .speaker import fuse_graph, init_fusion

FD_STEP = 1e-3
TOLERANCE = 1e-3
# Below this scale the comparison turns absolute: gradients are O(0.01-10)
# here, so a disagreement under TOLERANCE * _REL_FLOOR = 1e-7 is noise.
_REL_FLOOR = 1e-4


@dataclass(frozen=True)
class SuiteResult:
    name: str
    max_rel_err: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE


def check_gradients(build_loss, parameters, step: float = FD_STEP):
    """Max relative error between analytic and central-difference gradients.

    Uses the fourth-order central stencil on points +-step and +-step/2,
    which keeps the stencil width at the nominal step while suppressing
    the O(step^2) truncation term that would otherwise dominate the
    comparison on curvier loss surfaces. build_loss() must rebuild the
    loss graph from the parameters' current values on every call.
    """
    for p in parameters:
        p.zero_grad()
    loss = build_loss()
    ad.backward(loss)
    analytic = [p.grad.copy() for p in parameters]

    def eval_at(flat_value, i, saved, delta):
        flat_value[i] = saved + delta
        with ad.no_grad():
            out = float(build_loss().value)
        return out

    worst = 0.0
    checked = 0
    for p, grad in zip(parameters, analytic):
        flat_value = p.value.ravel()
        flat_grad = grad.ravel()
        for i in range(flat_value.size):
            saved = flat_value[i]
            f_up = eval_at(flat_value, i, saved, step)
            f_down = eval_at(flat_value, i, saved, -step)
            f_up_half = eval_at(flat_value, i, saved, step / 2.0)
            f_down_half = eval_at(flat_value, i, saved, -step / 2.0)
            flat_value[i] = saved
            numeric = (8.0 * (f_up_half - f_down_half) - (f_up - f_down)) / (6.0 * step)
            rel = abs(numeric - flat_grad[i]) / max(abs(numeric) + abs(flat_grad[i]), _REL_FLOOR)
            worst = max(worst, rel)
            checked += 1
    return worst, checked


# ---------------------------------------------------------------------------
# tiny scenarios

TINY_NET = dict(n_blocks=2, hidden=8, n_heads=2, conv_kernel=3, d_emb=4, n_fft=32, dropout_rate=0.0)
_TINY_SR = 64
_TINY_HOP = 8
_TINY_LEN = 40  # -> S = 6 frames at hop 8

# Finite differences are meaningless across a ReLU kink, so scenarios only
# accept data draws whose head pre-activations stay at least this far from
# zero; a 1e-3 parameter step moves them by well under that.
KINK_MARGIN = 0.02
_MAX_REROLLS = 50


def _masknet_margin(params, fusion, mag, e_ref, e_noisy) -> float:
    with ad.no_grad():
        e_t = fuse_graph(Tensor(e_ref), Tensor(e_noisy), fusion)
        feats = masknet.build_features_graph(mag, e_t)
    z = masknet.head_preactivation(feats.value, params)
    return float(np.min(np.abs(z)))


def _tiny_masknet_scenario(seed: int, variant: str):
    cfg = masknet.MaskNetConfig(variant=variant, **TINY_NET)
    params = masknet.init_params(cfg, seed)
    fusion = init_fusion(cfg.d_emb, seed + 1)
    for attempt in range(_MAX_REROLLS):
        rng = np.random.Generator(np.random.PCG64([seed + 2, attempt]))
        mag = rng.uniform(0.0, 2.0, size=(6, cfg.n_bins))
        e_ref = rng.normal(size=cfg.d_emb)
        e_noisy = rng.normal(size=cfg.d_emb)
        probe = rng.normal(size=(6, cfg.n_bins))
        if _masknet_margin(params, fusion, mag, e_ref, e_noisy) > KINK_MARGIN:
            break
    else:
        raise RuntimeError(f"no kink-safe data draw found for seed {seed}")

    def build_loss():
        e_t = fuse_graph(Tensor(e_ref), Tensor(e_noisy), fusion)
        feats = masknet.build_features_graph(mag, e_t)
        mask_t = masknet.forward_graph(feats, params, training=True, rng=None)
        return ad.tsum(mask_t * Tensor(probe))

    parameters = params.parameters() + fusion.parameters()
    return build_loss, parameters


def _tiny_item(seed: int, attempt: int):
    rng = np.random.Generator(np.random.PCG64([seed, attempt]))
    recipe = MixtureRecipe(
        seed=0,
        target_id="a",
        n_interferers=0,
        interferer_snrs_db=(),
        has_noise=False,
        noise_snr_db=10.0,
        has_rir=False,
        rir_id=None,
    )
    noisy = rng.normal(scale=0.2, size=_TINY_LEN)
    # a correlated clean target keeps SI-SNR in its smooth moderate-dB region
    clean = 0.7 * noisy + rng.normal(scale=0.06, size=_TINY_LEN)
    reference = rng.normal(scale=0.2, size=_TINY_LEN)
    example = MixtureExample(
        noisy=Waveform(noisy.astype(np.float32), _TINY_SR),
        clean_target=Waveform(clean.astype(np.float32), _TINY_SR),
        reference_utterance=Waveform(reference.astype(np.float32), _TINY_SR),
        recipe=recipe,
    )
    return CorpusItem(item_id="tiny", example=example, tokens=(1, 0, 3))


def _joint_margin(item, models) -> float:
    from . import dsp
    from .speaker import encode

    ex = item.example
    d_emb = models.fusion.d_emb
    with ad.no_grad():
        e_t = fuse_graph(
            Tensor(encode(ex.reference_utterance, d_emb).values),
            Tensor(encode(ex.noisy, d_emb).values),
            models.fusion,
        )
        s = dsp.stft(ex.noisy, models.mask.config.n_fft, models.hop)
        feats = masknet.build_features_graph(s.magnitude, e_t)
    z = masknet.head_preactivation(feats.value, models.mask)
    return float(np.min(np.abs(z)))


def _tiny_joint_scenario(seed: int, gate_enhanced: bool):
    cfg = masknet.MaskNetConfig(variant="conformer", **TINY_NET)
    asr_cfg = joint.ToyAsrConfig(vocab=4, window_frames=2, n_fft=32, hop=_TINY_HOP)
    models = joint.ModelBundle(
        mask=masknet.init_params(cfg, seed),
        fusion=init_fusion(cfg.d_emb, seed + 1),
        asr=joint.init_toy_asr(asr_cfg, seed + 2),
        hop=_TINY_HOP,
    )
    # extreme thresholds pin the gate so the loss stays smooth under perturbation
    threshold = 1e9 if gate_enhanced else -1e9
    train_cfg = joint.TrainConfig(
        threshold_db=threshold,
        joint=True,
        chunk_size_s=_TINY_LEN / _TINY_SR,
        steps=1,
        seed=seed,
    )
    for attempt in range(_MAX_REROLLS):
        item = _tiny_item(seed + 3, attempt)
        if _joint_margin(item, models) > KINK_MARGIN:
            break
    else:
        raise RuntimeError(f"no kink-safe data draw found for seed {seed}")
    cache: dict = {}

    def build_loss():
        outcome = joint._build_step(
            item, models, train_cfg, training=True, rng=None, emb_cache=cache
        )
        return outcome.total

    return build_loss, models.parameters()


def _fusion_scenario(seed: int):
    d_emb = 4
    fusion = init_fusion(d_emb, seed)
    rng = np.random.Generator(np.random.PCG64(seed + 1))
    e_ref = rng.normal(size=d_emb)
    e_noisy = rng.normal(size=d_emb)
    probe = rng.normal(size=d_emb)

    def build_loss():
        fused = fuse_graph(Tensor(e_ref), Tensor(e_noisy), fusion)
        return ad.tsum(fused * Tensor(probe))

    return build_loss, fusion.parameters()


def _toy_asr_scenario(seed: int):
    asr_cfg = joint.ToyAsrConfig(vocab=4, window_frames=2, n_fft=32, hop=_TINY_HOP)
    asr = joint.init_toy_asr(asr_cfg, seed)
    rng = np.random.Generator(np.random.PCG64(seed + 1))
    audio = Parameter(rng.normal(scale=0.2, size=_TINY_LEN))
    labels = (2, 0, 1)

    def build_loss():
        mag = diffdsp.stft_mag_graph(ad.param_tensor(audio), asr_cfg.n_fft, asr_cfg.hop)
        return joint.toy_asr_loss(mag, labels, asr)

    return build_loss, [audio] + asr.parameters()


SUITES = {
    "masknet_conformer": lambda seed: _tiny_masknet_scenario(seed, "conformer"),
    "masknet_recurrent": lambda seed: _tiny_masknet_scenario(seed, "recurrent"),
    "fusion": _fusion_scenario,
    "toy_asr_audio": _toy_asr_scenario,
    "joint_enhanced_gate": lambda seed: _tiny_joint_scenario(seed, True),
    "joint_clean_gate": lambda seed: _tiny_joint_scenario(seed, False),
}


def run_suite(name: str, seed: int = 3) -> SuiteResult:
    build_loss, parameters = SUITES[name](seed)
    worst, checked = check_gradients(build_loss, parameters)
    return SuiteResult(name=name, max_rel_err=worst, n_checked=checked)


def run_all(seed: int = 3, names=None):
    return [run_suite(name, seed) for name in (names or SUITES)]
