"""Mask estimator: input projection, conformer blocks, ReLU head.

Each block applies, in order: half-step feed-forward, multi-head
self-attention, a gated depthwise-convolution module, a second half-step
feed-forward, and a closing layer norm. Sub-modules are pre-normed; every
one of them contributes an additive residual term that vanishes when its
weights are zero. The recurrent variant swaps the block stack for
bidirectional LSTM layers behind the same interface.

Attention uses no positional information unless cfg.pos_encoding is set,
in which case a sinusoidal encoding is added after the input projection.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .checkpoint import f32_representable, load_container, save_container
from .dsp import Mask, Stft
from .errors import ConfigError, FormatError, InvalidInputError, NumericError
from .speaker import SpeakerEmbedding

FFN_EXPANSION = 4
LN_EPS = 1e-6


@dataclass(frozen=True)
class MaskNetConfig:
    n_blocks: int = 4
    hidden: int = 64
    n_heads: int = 4
    conv_kernel: int = 7
    d_emb: int = 64
    n_fft: int = 512
    dropout_rate: float = 0.1
    variant: str = "conformer"
    pos_encoding: bool = False

    def __post_init__(self):
        if self.n_blocks < 0:
            raise ConfigError(f"n_blocks must be >= 0, got {self.n_blocks}")
        if self.hidden <= 0 or self.n_heads <= 0 or self.hidden % self.n_heads != 0:
            raise ConfigError(
                f"hidden ({self.hidden}) must be a positive multiple of n_heads ({self.n_heads})"
            )
        if self.variant == "recurrent" and self.hidden % 2 != 0:
            raise ConfigError("recurrent variant needs an even hidden size")
        if self.conv_kernel <= 0 or self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd and positive, got {self.conv_kernel}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.variant not in ("conformer", "recurrent"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.n_fft <= 0 or self.n_fft % 2 != 0:
            raise ConfigError(f"n_fft must be a positive even integer, got {self.n_fft}")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def feat_width(self) -> int:
        return self.n_bins + self.d_emb


class MaskNetParams:
    """All learnable tensors of the mask estimator, each with a gradient slot."""

    def __init__(self, config: MaskNetConfig, tensors: dict):
        self.config = config
        self.tensors = tensors  # ordered name -> Parameter

    def zero_grad(self):
        for p in self.tensors.values():
            p.zero_grad()

    def parameters(self):
        return list(self.tensors.values())

    def named(self):
        return self.tensors.items()


def _uniform(rng, shape, fan_in):
    lim = 1.0 / np.sqrt(fan_in)
    return f32_representable(rng.uniform(-lim, lim, size=shape))


def init_params(cfg: MaskNetConfig, seed: int) -> MaskNetParams:
    """Seeded fan-in-scaled uniform init; deterministic given (cfg, seed).

    The head bias starts at 1.0 so an untrained network begins near an
    identity mask instead of silencing its input.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    t = {}

    def weight(name, shape, fan_in):
        t[name] = Parameter(_uniform(rng, shape, fan_in))

    def zeros(name, shape):
        t[name] = Parameter(np.zeros(shape))

    def ones(name, shape):
        t[name] = Parameter(np.ones(shape))

    h = cfg.hidden
    # the embedding rows start at their own fan-in scale so the conditioning
    # signal is not drowned out by the spectral columns
    proj = np.concatenate(
        [
            _uniform(rng, (cfg.n_bins, h), cfg.feat_width),
            _uniform(rng, (cfg.d_emb, h), cfg.d_emb),
        ]
    )
    t["proj.w"] = Parameter(proj)
    zeros("proj.b", (h,))
    if cfg.variant == "conformer":
        inner = FFN_EXPANSION * h
        for i in range(cfg.n_blocks):
            b = f"block{i}"
            ones(f"{b}.ffn1.ln.g", (h,))
            zeros(f"{b}.ffn1.ln.b", (h,))
            weight(f"{b}.ffn1.w1", (h, inner), h)
            zeros(f"{b}.ffn1.b1", (inner,))
            weight(f"{b}.ffn1.w2", (inner, h), inner)
            zeros(f"{b}.ffn1.b2", (h,))
            ones(f"{b}.attn.ln.g", (h,))
            zeros(f"{b}.attn.ln.b", (h,))
            for proj in ("q", "k", "v", "o"):
                weight(f"{b}.attn.w{proj}", (h, h), h)
                zeros(f"{b}.attn.b{proj}", (h,))
            ones(f"{b}.conv.ln.g", (h,))
            zeros(f"{b}.conv.ln.b", (h,))
            weight(f"{b}.conv.pw1_w", (h, 2 * h), h)
            zeros(f"{b}.conv.pw1_b", (2 * h,))
            weight(f"{b}.conv.dw_w", (cfg.conv_kernel, h), cfg.conv_kernel)
            zeros(f"{b}.conv.dw_b", (h,))
            ones(f"{b}.conv.norm.g", (h,))
            zeros(f"{b}.conv.norm.b", (h,))
            weight(f"{b}.conv.pw2_w", (h, h), h)
            zeros(f"{b}.conv.pw2_b", (h,))
            ones(f"{b}.ffn2.ln.g", (h,))
            zeros(f"{b}.ffn2.ln.b", (h,))
            weight(f"{b}.ffn2.w1", (h, inner), h)
            zeros(f"{b}.ffn2.b1", (inner,))
            weight(f"{b}.ffn2.w2", (inner, h), inner)
            zeros(f"{b}.ffn2.b2", (h,))
            ones(f"{b}.out_ln.g", (h,))
            zeros(f"{b}.out_ln.b", (h,))
    else:
        half = h // 2
        for i in range(cfg.n_blocks):
            for d in ("fw", "bw"):
                weight(f"lstm{i}.{d}.wx", (h, 4 * half), h)
                weight(f"lstm{i}.{d}.wh", (half, 4 * half), half)
                bias = np.zeros(4 * half)
                bias[half : 2 * half] = 1.0  # forget-gate bias
                t[f"lstm{i}.{d}.b"] = Parameter(bias)
    weight("head.w", (h, cfg.n_bins), h)
    ones("head.b", (cfg.n_bins,))
    return MaskNetParams(cfg, t)


def build_features(s: Stft, e: SpeakerEmbedding) -> np.ndarray:
    """Per-frame feature rows [F_t || e]; the embedding broadcasts to every frame."""
    mag = s.magnitude
    emb = np.asarray(e.values, dtype=np.float64)
    if emb.ndim != 1:
        raise InvalidInputError(f"embedding must be a vector, got shape {emb.shape}")
    return np.concatenate(
        [mag, np.broadcast_to(emb, (mag.shape[0], emb.shape[0]))], axis=1
    )


def build_features_graph(mag: np.ndarray, emb: Tensor) -> Tensor:
    """Graph version of build_features; gradients flow into the embedding."""
    rows = ad.take(emb.reshape(1, -1), np.zeros(mag.shape[0], dtype=np.intp))
    return ad.concat([Tensor(mag), rows], axis=1)


def sinusoidal_encoding(n_frames: int, width: int) -> np.ndarray:
    pos = np.arange(n_frames)[:, None]
    dim = np.arange(width)[None, :]
    angle = pos / np.power(10000.0, (2 * (dim // 2)) / width)
    enc = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


def _ln(x, p, name):
    return ad.layer_norm(x, ad.param_tensor(p[f"{name}.g"]), ad.param_tensor(p[f"{name}.b"]), LN_EPS)


def _affine(x, p, w_name, b_name):
    return x @ ad.param_tensor(p[w_name]) + ad.param_tensor(p[b_name])


def _dropout(x, rate, training, rng):
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return x * Tensor(keep)


def _ffn(x, p, prefix, cfg, training, rng):
    u = ad.silu(_affine(_ln(x, p, f"{prefix}.ln"), p, f"{prefix}.w1", f"{prefix}.b1"))
    u = _dropout(u, cfg.dropout_rate, training, rng)
    return _affine(u, p, f"{prefix}.w2", f"{prefix}.b2")


def _mhsa(x, p, prefix, cfg, training, rng):
    xn = _ln(x, p, f"{prefix}.ln")
    q = _affine(xn, p, f"{prefix}.wq", f"{prefix}.bq")
    k = _affine(xn, p, f"{prefix}.wk", f"{prefix}.bk")
    v = _affine(xn, p, f"{prefix}.wv", f"{prefix}.bv")
    d_head = cfg.hidden // cfg.n_heads
    scale = 1.0 / np.sqrt(d_head)
    heads = []
    for i in range(cfg.n_heads):
        cols = slice(i * d_head, (i + 1) * d_head)
        scores = (q[:, cols] @ k[:, cols].T) * scale
        probs = ad.softmax_rows(scores)
        probs = _dropout(probs, cfg.dropout_rate, training, rng)
        heads.append(ad.attend(probs, v[:, cols]))
    ctx = ad.concat(heads, axis=1) if len(heads) > 1 else heads[0]
    return _affine(ctx, p, f"{prefix}.wo", f"{prefix}.bo")


def _conv_module(x, p, prefix, cfg, training, rng):
    xn = _ln(x, p, f"{prefix}.ln")
    u = _affine(xn, p, f"{prefix}.pw1_w", f"{prefix}.pw1_b")
    h = cfg.hidden
    gated = u[:, :h] * ad.sigmoid(u[:, h:])
    c = ad.depthwise_conv1d(gated, ad.param_tensor(p[f"{prefix}.dw_w"]))
    c = c + ad.param_tensor(p[f"{prefix}.dw_b"])
    c = ad.layer_norm(
        c, ad.param_tensor(p[f"{prefix}.norm.g"]), ad.param_tensor(p[f"{prefix}.norm.b"]), LN_EPS
    )
    c = ad.silu(c)
    c = _dropout(c, cfg.dropout_rate, training, rng)
    return _affine(c, p, f"{prefix}.pw2_w", f"{prefix}.pw2_b")


def _conformer_block(x, p, i, cfg, training, rng):
    b = f"block{i}"
    x = x + 0.5 * _ffn(x, p, f"{b}.ffn1", cfg, training, rng)
    x = x + _dropout(_mhsa(x, p, f"{b}.attn", cfg, training, rng), cfg.dropout_rate, training, rng)
    x = x + _conv_module(x, p, f"{b}.conv", cfg, training, rng)
    x = x + 0.5 * _ffn(x, p, f"{b}.ffn2", cfg, training, rng)
    return _ln(x, p, f"{b}.out_ln")


def _lstm_direction(x, p, prefix, half):
    pre = _affine(x, p, f"{prefix}.wx", f"{prefix}.b")
    wh = ad.param_tensor(p[f"{prefix}.wh"])
    h = Tensor(np.zeros((1, half)))
    c = Tensor(np.zeros((1, half)))
    outs = []
    for i in range(x.shape[0]):
        z = pre[i : i + 1, :] + h @ wh
        gi = ad.sigmoid(z[:, :half])
        gf = ad.sigmoid(z[:, half : 2 * half])
        gc = ad.tanh(z[:, 2 * half : 3 * half])
        go = ad.sigmoid(z[:, 3 * half :])
        c = gf * c + gi * gc
        h = go * ad.tanh(c)
        outs.append(h)
    return ad.concat(outs, axis=0)


def _bilstm_layer(x, p, i, half):
    rev = np.arange(x.shape[0])[::-1].copy()
    fwd = _lstm_direction(x, p, f"lstm{i}.fw", half)
    bwd = ad.take(_lstm_direction(ad.take(x, rev), p, f"lstm{i}.bw", half), rev)
    return ad.concat([fwd, bwd], axis=1)


def _backbone(feats: Tensor, params: MaskNetParams, cfg: MaskNetConfig, training, rng) -> Tensor:
    p = params.tensors
    # Log-compress the magnitude columns before projecting: raw magnitudes
    # span a ~100x larger range than the unit-norm embedding columns, which
    # starves the conditioning pathway at desk-scale step budgets.
    mag_cols = feats[:, : cfg.n_bins]
    emb_cols = feats[:, cfg.n_bins :]
    compressed = ad.concat([ad.log(mag_cols + 1.0), emb_cols], axis=1)
    x = _affine(compressed, p, "proj.w", "proj.b")
    if cfg.pos_encoding:
        x = x + Tensor(sinusoidal_encoding(feats.shape[0], cfg.hidden))
    if cfg.variant == "conformer":
        for i in range(cfg.n_blocks):
            x = _conformer_block(x, p, i, cfg, training, rng)
            if not np.all(np.isfinite(x.value)):
                raise NumericError(f"non-finite activations after block {i}")
    else:
        half = cfg.hidden // 2
        for i in range(cfg.n_blocks):
            x = _bilstm_layer(x, p, i, half)
            if not np.all(np.isfinite(x.value)):
                raise NumericError(f"non-finite activations after recurrent layer {i}")
    return x


def head_preactivation(g_hat, params: MaskNetParams, cfg: MaskNetConfig | None = None) -> np.ndarray:
    """Pre-ReLU head values; lets gradient-check scenarios verify a kink margin."""
    cfg = cfg or params.config
    with ad.no_grad():
        x = _backbone(ad.as_tensor(g_hat), params, cfg, False, None)
        z = _affine(x, params.tensors, "head.w", "head.b")
    return z.value


def forward_graph(
    g_hat,
    params: MaskNetParams,
    cfg: MaskNetConfig | None = None,
    *,
    training: bool = False,
    rng=None,
) -> Tensor:
    """Build the mask graph; the returned tensor doubles as the activation cache."""
    cfg = cfg or params.config
    feats = ad.as_tensor(g_hat)
    if feats.ndim != 2 or feats.shape[1] != cfg.feat_width:
        raise InvalidInputError(
            f"feature width {feats.shape} does not match config ({cfg.feat_width})"
        )
    if training and cfg.dropout_rate > 0.0 and rng is None:
        raise InvalidInputError("training-mode forward with dropout needs an rng")
    x = _backbone(feats, params, cfg, training, rng)
    return ad.relu(_affine(x, params.tensors, "head.w", "head.b"))


def forward(g_hat: np.ndarray, params: MaskNetParams, cfg: MaskNetConfig | None = None) -> Mask:
    """Deterministic inference-mode forward pass (dropout off)."""
    with ad.no_grad():
        out = forward_graph(g_hat, params, cfg, training=False)
    return Mask(out.value)


def backward(mask_out: Tensor, loss_grad_wrt_mask: np.ndarray) -> None:
    """Fill every reachable Parameter gradient slot by the chain rule."""
    ad.backward(mask_out, seed=loss_grad_wrt_mask)


def save_checkpoint(params: MaskNetParams, path) -> None:
    config = {"kind": "masknet", "masknet": asdict(params.config)}
    save_container(path, config, {k: v.value for k, v in params.named()})


def load_checkpoint(path):
    """Returns (MaskNetParams, MaskNetConfig); bit-exact with what was saved."""
    config, tensors = load_container(path)
    if "masknet" not in config:
        raise FormatError("checkpoint has no masknet config section")
    cfg = MaskNetConfig(**config["masknet"])
    reference = init_params(cfg, seed=0)
    loaded = {}
    for name in reference.tensors:
        if name not in tensors:
            raise FormatError(f"checkpoint missing tensor {name!r}")
        if tensors[name].shape != reference.tensors[name].shape:
            raise FormatError(
                f"tensor {name!r} has shape {tensors[name].shape}, "
                f"expected {reference.tensors[name].shape}"
            )
        loaded[name] = Parameter(tensors[name])
    return MaskNetParams(cfg, loaded), cfg
