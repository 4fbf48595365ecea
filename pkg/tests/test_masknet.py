import numpy as np
import pytest

from voxtract import autodiff as ad
from voxtract import masknet
from voxtract.autodiff import Tensor
from voxtract.dsp import stft
from voxtract.errors import ConfigError, FormatError, InvalidInputError, StateError
from voxtract.masknet import (
    MaskNetConfig,
    build_features,
    build_features_graph,
    forward,
    forward_graph,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from voxtract.speaker import SpeakerEmbedding

from conftest import random_waveform

TINY = MaskNetConfig(
    n_blocks=2, hidden=8, n_heads=2, conv_kernel=3, d_emb=4, n_fft=32, dropout_rate=0.0
)


@pytest.fixture
def tiny_params():
    return init_params(TINY, seed=7)


def tiny_feats(rng, n_frames=6, cfg=TINY):
    return rng.uniform(0.0, 2.0, size=(n_frames, cfg.feat_width))


# ---------------------------------------------------------------------------
# straight-line reference: independently coded evaluation, no shared helpers


def _np_silu(x):
    return x / (1.0 + np.exp(-x))


def _np_ln(x, g, b, eps=1e-6):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def straight_line_forward(feats, params, cfg):
    t = {k: p.value for k, p in params.named()}
    n_bins = cfg.n_bins
    compressed = np.concatenate([np.log(feats[:, :n_bins] + 1.0), feats[:, n_bins:]], axis=1)
    x = compressed @ t["proj.w"] + t["proj.b"]
    for i in range(cfg.n_blocks):
        b = f"block{i}"
        # half-step feed-forward
        u = _np_ln(x, t[f"{b}.ffn1.ln.g"], t[f"{b}.ffn1.ln.b"])
        u = _np_silu(u @ t[f"{b}.ffn1.w1"] + t[f"{b}.ffn1.b1"]) @ t[f"{b}.ffn1.w2"] + t[f"{b}.ffn1.b2"]
        x = x + 0.5 * u
        # attention
        u = _np_ln(x, t[f"{b}.attn.ln.g"], t[f"{b}.attn.ln.b"])
        q = u @ t[f"{b}.attn.wq"] + t[f"{b}.attn.bq"]
        k = u @ t[f"{b}.attn.wk"] + t[f"{b}.attn.bk"]
        v = u @ t[f"{b}.attn.wv"] + t[f"{b}.attn.bv"]
        d_head = cfg.hidden // cfg.n_heads
        heads = []
        for h in range(cfg.n_heads):
            sl = slice(h * d_head, (h + 1) * d_head)
            scores = q[:, sl] @ k[:, sl].T / np.sqrt(d_head)
            e = np.exp(scores - scores.max(axis=1, keepdims=True))
            heads.append((e / e.sum(axis=1, keepdims=True)) @ v[:, sl])
        x = x + np.concatenate(heads, axis=1) @ t[f"{b}.attn.wo"] + t[f"{b}.attn.bo"]
        # convolution module
        u = _np_ln(x, t[f"{b}.conv.ln.g"], t[f"{b}.conv.ln.b"])
        u = u @ t[f"{b}.conv.pw1_w"] + t[f"{b}.conv.pw1_b"]
        gated = u[:, : cfg.hidden] / (1.0 + np.exp(-u[:, cfg.hidden :])) * 1.0
        gated = u[:, : cfg.hidden] * (1.0 / (1.0 + np.exp(-u[:, cfg.hidden :])))
        kernel = t[f"{b}.conv.dw_w"]
        half = cfg.conv_kernel // 2
        padded = np.pad(gated, ((half, half), (0, 0)))
        conv = np.zeros_like(gated)
        for tt in range(gated.shape[0]):
            for kk in range(cfg.conv_kernel):
                conv[tt] += padded[tt + kk] * kernel[kk]
        conv = conv + t[f"{b}.conv.dw_b"]
        conv = _np_ln(conv, t[f"{b}.conv.norm.g"], t[f"{b}.conv.norm.b"])
        x = x + _np_silu(conv) @ t[f"{b}.conv.pw2_w"] + t[f"{b}.conv.pw2_b"]
        # second half-step feed-forward and closing norm
        u = _np_ln(x, t[f"{b}.ffn2.ln.g"], t[f"{b}.ffn2.ln.b"])
        u = _np_silu(u @ t[f"{b}.ffn2.w1"] + t[f"{b}.ffn2.b1"]) @ t[f"{b}.ffn2.w2"] + t[f"{b}.ffn2.b2"]
        x = _np_ln(x + 0.5 * u, t[f"{b}.out_ln.g"], t[f"{b}.out_ln.b"])
    return np.maximum(x @ t["head.w"] + t["head.b"], 0.0)


class TestBuildFeatures:
    def test_shape(self, rng):
        w = random_waveform(rng, seconds=0.1)
        s = stft(w, 512, 128)
        e = SpeakerEmbedding(rng.normal(size=64))
        feats = build_features(s, e)
        assert feats.shape == (s.n_frames, 257 + 64)

    def test_zero_embedding_zero_columns(self, rng):
        s = stft(random_waveform(rng, seconds=0.1), 512, 128)
        feats = build_features(s, SpeakerEmbedding(np.zeros(16)))
        assert np.all(feats[:, 257:] == 0.0)

    def test_magnitude_slice_exact(self, rng):
        s = stft(random_waveform(rng, seconds=0.1), 512, 128)
        feats = build_features(s, SpeakerEmbedding(rng.normal(size=16)))
        assert np.array_equal(feats[:, :257], s.magnitude)

    def test_graph_version_matches(self, rng):
        s = stft(random_waveform(rng, seconds=0.1), 512, 128)
        e = rng.normal(size=16)
        feats = build_features(s, SpeakerEmbedding(e))
        with ad.no_grad():
            graph = build_features_graph(s.magnitude, Tensor(e))
        assert np.array_equal(graph.value, feats)


class TestForward:
    def test_non_negative(self, rng, tiny_params):
        for _ in range(20):
            mask = forward(tiny_feats(rng), tiny_params)
            assert mask.values.min() >= 0.0

    def test_output_shape(self, rng, tiny_params):
        assert forward(tiny_feats(rng, n_frames=9), tiny_params).values.shape == (9, TINY.n_bins)

    def test_deterministic_bitwise(self, rng, tiny_params):
        feats = tiny_feats(rng)
        a = forward(feats, tiny_params)
        b = forward(feats, tiny_params)
        assert np.array_equal(a.values, b.values)

    def test_zero_blocks_degenerates_to_head(self, rng):
        cfg = MaskNetConfig(
            n_blocks=0, hidden=8, n_heads=2, conv_kernel=3, d_emb=4, n_fft=32, dropout_rate=0.0
        )
        params = init_params(cfg, seed=1)
        feats = tiny_feats(rng, cfg=cfg)
        compressed = np.concatenate(
            [np.log(feats[:, : cfg.n_bins] + 1.0), feats[:, cfg.n_bins :]], axis=1
        )
        expected = np.maximum(
            (compressed @ params.tensors["proj.w"].value + params.tensors["proj.b"].value)
            @ params.tensors["head.w"].value
            + params.tensors["head.b"].value,
            0.0,
        )
        assert np.allclose(forward(feats, params).values, expected, atol=1e-12)

    def test_matches_straight_line_reference(self, rng, tiny_params):
        feats = tiny_feats(rng, n_frames=4)
        ours = forward(feats, tiny_params).values
        reference = straight_line_forward(feats, tiny_params, TINY)
        assert np.max(np.abs(ours - reference)) < 1e-6

    def test_feature_width_mismatch_rejected(self, rng, tiny_params):
        with pytest.raises(InvalidInputError):
            forward(rng.uniform(size=(6, 10)), tiny_params)

    def test_dropout_needs_rng_in_training(self, rng):
        cfg = MaskNetConfig(
            n_blocks=1, hidden=8, n_heads=2, conv_kernel=3, d_emb=4, n_fft=32, dropout_rate=0.5
        )
        params = init_params(cfg, seed=0)
        with pytest.raises(InvalidInputError):
            forward_graph(tiny_feats(rng, cfg=cfg), params, training=True, rng=None)

    def test_dropout_changes_training_output_not_inference(self, rng):
        cfg = MaskNetConfig(
            n_blocks=1, hidden=8, n_heads=2, conv_kernel=3, d_emb=4, n_fft=32, dropout_rate=0.5
        )
        params = init_params(cfg, seed=0)
        feats = tiny_feats(rng, cfg=cfg)
        t1 = forward_graph(feats, params, training=True, rng=np.random.default_rng(1))
        t2 = forward_graph(feats, params, training=True, rng=np.random.default_rng(2))
        assert not np.array_equal(t1.value, t2.value)
        assert np.array_equal(forward(feats, params).values, forward(feats, params).values)


class TestStructure:
    def test_block_identity_at_zero_params(self, rng, tiny_params):
        params = init_params(TINY, seed=7)
        for name, p in params.named():
            if name.startswith("block"):
                if name.endswith("ln.g") or name.endswith("norm.g"):
                    p.value = np.ones_like(p.value)
                else:
                    p.value = np.zeros_like(p.value)
        x = rng.normal(size=(6, TINY.hidden))
        x = (x - x.mean(axis=1, keepdims=True)) / x.std(axis=1, keepdims=True)
        out = Tensor(x)
        with ad.no_grad():
            for i in range(TINY.n_blocks):
                out = masknet._conformer_block(out, params.tensors, i, TINY, False, None)
        assert np.max(np.abs(out.value - x)) < 1e-5

    def test_permutation_equivariance_exact_without_positions(self, rng):
        cfg = MaskNetConfig(
            n_blocks=2, hidden=8, n_heads=2, conv_kernel=1, d_emb=4, n_fft=32,
            dropout_rate=0.0, pos_encoding=False,
        )
        params = init_params(cfg, seed=3)
        feats = tiny_feats(rng, n_frames=11, cfg=cfg)
        perm = rng.permutation(11)
        base = forward(feats, params).values
        permuted = forward(feats[perm], params).values
        assert np.array_equal(permuted, base[perm])

    def test_positional_encoding_breaks_equivariance(self, rng):
        cfg = MaskNetConfig(
            n_blocks=2, hidden=8, n_heads=2, conv_kernel=1, d_emb=4, n_fft=32,
            dropout_rate=0.0, pos_encoding=True,
        )
        params = init_params(cfg, seed=3)
        feats = tiny_feats(rng, n_frames=11, cfg=cfg)
        perm = rng.permutation(11)
        base = forward(feats, params).values
        permuted = forward(feats[perm], params).values
        assert not np.array_equal(permuted, base[perm])


class TestBackward:
    def test_zero_upstream_gradient_gives_zero_grads(self, rng, tiny_params):
        tiny_params.zero_grad()
        out = forward_graph(tiny_feats(rng), tiny_params, training=True, rng=None)
        masknet.backward(out, np.zeros_like(out.value))
        assert all(np.all(p.grad == 0.0) for p in tiny_params.parameters())

    def test_embedding_input_receives_gradient(self, rng, tiny_params):
        e = ad.Parameter(rng.normal(size=TINY.d_emb))
        mag = rng.uniform(0, 2, size=(6, TINY.n_bins))
        feats = build_features_graph(mag, ad.param_tensor(e))
        out = forward_graph(feats, tiny_params, training=True, rng=None)
        masknet.backward(out, np.ones_like(out.value))
        assert np.any(e.grad != 0.0)

    def test_backward_without_recorded_forward_raises(self, rng, tiny_params):
        with ad.no_grad():
            out = forward_graph(tiny_feats(rng), tiny_params)
        with pytest.raises(StateError):
            masknet.backward(out, np.ones_like(out.value))


class TestRecurrentVariant:
    def test_same_contract_as_conformer(self, rng):
        cfg = MaskNetConfig(
            n_blocks=2, hidden=8, n_heads=2, conv_kernel=3, d_emb=4, n_fft=32,
            dropout_rate=0.0, variant="recurrent",
        )
        params = init_params(cfg, seed=5)
        feats = tiny_feats(rng, cfg=cfg)
        mask = forward(feats, params)
        assert mask.values.shape == (6, cfg.n_bins)
        assert mask.values.min() >= 0.0

    def test_odd_hidden_rejected(self):
        with pytest.raises(ConfigError):
            MaskNetConfig(hidden=9, n_heads=3, variant="recurrent")


class TestConfigValidation:
    def test_heads_must_divide_hidden(self):
        with pytest.raises(ConfigError):
            MaskNetConfig(hidden=10, n_heads=3)

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            MaskNetConfig(conv_kernel=4)

    def test_unknown_variant_rejected(self):
        with pytest.raises(ConfigError):
            MaskNetConfig(variant="transformer")


class TestCheckpoint:
    def test_init_deterministic(self):
        a = init_params(TINY, seed=7)
        b = init_params(TINY, seed=7)
        assert all(
            np.array_equal(x.value, y.value) for (_, x), (_, y) in zip(a.named(), b.named())
        )

    def test_roundtrip_bit_exact_forward(self, rng, tiny_params, tmp_path):
        feats = tiny_feats(rng)
        before = forward(feats, tiny_params).values
        path = tmp_path / "net.vxc"
        save_checkpoint(tiny_params, path)
        loaded, cfg = load_checkpoint(path)
        assert cfg == TINY
        assert np.array_equal(forward(feats, loaded).values, before)

    def test_truncated_file_raises_format_error(self, tiny_params, tmp_path):
        path = tmp_path / "net.vxc"
        save_checkpoint(tiny_params, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_bad_magic_raises(self, tiny_params, tmp_path):
        path = tmp_path / "net.vxc"
        save_checkpoint(tiny_params, path)
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_checkpoint(path)
