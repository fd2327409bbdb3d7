import numpy as np
import pytest

from pavsod.layers import AttentionLayer, MultiHeadAttention
from pavsod.tensor import Tensor, backward, grad_check, precision
from pavsod.visual import (Backbone, FpnDecoder, TemporalNonLocal, TransformerEncoder, VisualConfig,
                           VisualEncoder, from_tokens, to_tokens)


@pytest.fixture(autouse=True)
def f64():
    with precision("f64"):
        yield


def _frames(rng, t=2, h=32, w=64):
    return Tensor(rng.uniform(size=(t, 3, h, w)))


def test_backbone_strides_and_widths(rng):
    bb = Backbone(rng, (4, 5, 6, 7))
    levels = bb(_frames(rng))
    assert [lv.shape for lv in levels] == [(2, 4, 16, 32), (2, 5, 8, 16), (2, 6, 4, 8), (2, 7, 2, 4)]


@pytest.mark.parametrize("shape", [(1, 3, 32, 32), (1, 3, 24, 48), (1, 1, 32, 64)])
def test_backbone_rejects_bad_frames(rng, shape):
    with pytest.raises(ValueError):
        Backbone(rng, (4, 5, 6, 7))(Tensor(np.zeros(shape)))


def test_backbone_zero_input_zero_bias_gives_zero(rng):
    levels = Backbone(rng, (4, 5, 6, 7))(Tensor(np.zeros((1, 3, 32, 64))))
    assert all(not lv.data.any() for lv in levels)


def test_transformer_zero_layers_is_identity(rng):
    x = Tensor(rng.normal(size=(2, 5, 8)))
    assert np.array_equal(TransformerEncoder(rng, 8, 0, 2)(x).data, x.data)


def test_transformer_head_mismatch(rng):
    with pytest.raises(ValueError):
        TransformerEncoder(rng, 6, 1, 4)


def test_single_token_attention_weight_is_one(rng):
    mha = MultiHeadAttention(rng, 8, 8, 2)
    x = Tensor(rng.normal(size=(1, 8)))
    attn, v = mha.weights(x, x)
    assert np.allclose(attn.data, 1.0)
    expected = mha.o(Tensor(mha.v(x).data)).data
    assert np.allclose(mha(x, x).data, expected, atol=1e-12)


def test_attention_matches_scalar_loop(rng):
    mha = MultiHeadAttention(rng, 4, 3, 2)
    xq, xk = rng.normal(size=(4, 4)), rng.normal(size=(3, 3))
    got = mha(Tensor(xq), Tensor(xk)).data
    q = xq @ mha.q.w.data + mha.q.b.data
    k = xk @ mha.k.w.data + mha.k.b.data
    v = xk @ mha.v.w.data + mha.v.b.data
    heads = []
    for h in range(2):
        sl = slice(2 * h, 2 * h + 2)
        out = np.zeros((4, 2))
        for s in range(4):
            scores = [sum(q[s, sl][i] * k[j, sl][i] for i in range(2)) / np.sqrt(2) for j in range(3)]
            e = np.exp(np.array(scores) - max(scores))
            a = e / e.sum()
            for j in range(3):
                out[s] += a[j] * v[j, sl]
        heads.append(out)
    want = np.concatenate(heads, axis=1) @ mha.o.w.data + mha.o.b.data
    assert np.allclose(got, want, rtol=0, atol=1e-13)


def test_attention_rows_sum_to_one(rng):
    mha = MultiHeadAttention(rng, 8, 4, 4)
    attn, _ = mha.weights(Tensor(rng.normal(size=(6, 8))), Tensor(rng.normal(size=(5, 4))))
    assert np.max(np.abs(attn.data.sum(-1) - 1)) < 1e-12


def test_transformer_permutation_equivariant(rng):
    enc = TransformerEncoder(rng, 8, 2, 2)
    x = rng.normal(size=(1, 6, 8))
    perm = rng.permutation(6)
    a = enc(Tensor(x)).data[:, perm]
    b = enc(Tensor(x[:, perm])).data
    assert np.allclose(a, b, atol=1e-12)


def test_zero_output_projection_reduces_to_layer_norm(rng):
    layer = AttentionLayer(rng, 8, 4, 2)
    layer.attn.o.w.data[:] = 0
    x = Tensor(rng.normal(size=(5, 8)))
    a = layer(x, Tensor(rng.normal(size=(3, 4)))).data
    b = layer(x, Tensor(rng.normal(size=(3, 4)))).data
    assert np.array_equal(a, b)


def test_tokens_round_trip(rng):
    x = Tensor(rng.normal(size=(2, 3, 4, 5)))
    assert np.array_equal(from_tokens(to_tokens(x), 4, 5).data, x.data)


def test_non_local_starts_as_identity(rng):
    block = TemporalNonLocal(rng, 6)
    x = Tensor(rng.normal(size=(3, 6, 2, 4)))
    assert np.array_equal(block(x).data, x.data)


def test_non_local_single_frame_is_spatial(rng):
    block = TemporalNonLocal(rng, 4)
    block.out_w.data[:] = rng.normal(size=block.out_w.shape)
    x = rng.normal(size=(1, 4, 2, 3))
    y = block(Tensor(x)).data
    seq = x[0].reshape(4, -1).T
    th = seq @ block.theta.w.data + block.theta.b.data
    ph = seq @ block.phi.w.data + block.phi.b.data
    g = seq @ block.g.w.data + block.g.b.data
    s = th @ ph.T / np.sqrt(th.shape[1])
    a = np.exp(s - s.max(1, keepdims=True))
    a /= a.sum(1, keepdims=True)
    want = seq + (a @ g) @ block.out_w.data + block.out_b.data
    assert np.allclose(y[0].reshape(4, -1).T, want, atol=1e-12)


def test_non_local_frame_permutation_equivariant(rng):
    block = TemporalNonLocal(rng, 4)
    block.out_w.data[:] = rng.normal(size=block.out_w.shape)
    x = rng.normal(size=(3, 4, 2, 2))
    perm = [2, 0, 1]
    assert np.allclose(block(Tensor(x)).data[perm], block(Tensor(x[perm])).data, atol=1e-12)


def test_non_local_identical_frames_identical_outputs(rng):
    block = TemporalNonLocal(rng, 4)
    block.out_w.data[:] = rng.normal(size=block.out_w.shape)
    one = rng.normal(size=(1, 4, 2, 2))
    y = block(Tensor(np.repeat(one, 3, axis=0))).data
    assert np.array_equal(y[0], y[1]) and np.array_equal(y[1], y[2])


def test_decoder_output_shape_and_zero_params(rng):
    cfg = VisualConfig(widths=(4, 5, 6, 7), fpn_width=4)
    dec = FpnDecoder(rng, cfg)
    levels = Backbone(rng, cfg.widths)(_frames(rng))
    out = dec(levels[-1], levels)
    assert out.shape == (2, 1, 32, 64)
    for p in dec.parameters():
        p.data[:] = 0
    assert not dec(levels[-1], levels).data.any()


def test_decoder_rejects_incompatible_skips(rng):
    cfg = VisualConfig(widths=(4, 5, 6, 7), fpn_width=4)
    dec = FpnDecoder(rng, cfg)
    levels = [Tensor(rng.normal(size=(1, c, 16 // 2 ** i, 32 // 2 ** i))) for i, c in enumerate(cfg.widths)]
    levels[1] = Tensor(rng.normal(size=(1, 5, 7, 16)))
    with pytest.raises(ValueError):
        dec(levels[-1], levels)


def test_gradient_reaches_shallowest_level(rng):
    cfg = VisualConfig(widths=(4, 5, 6, 8), transformer_layers=1, heads=2, fpn_width=4)
    enc, dec = VisualEncoder(cfg, rng), FpnDecoder(rng, cfg)
    f, levels = enc(_frames(rng, t=1))
    backward(dec(f, levels).sum())
    first = enc.backbone.stages[0][0].w
    assert first.grad is not None and np.abs(first.grad).max() > 0


def test_logit_stride_validation():
    with pytest.raises(ValueError):
        VisualConfig(logit_stride=16)
    assert VisualConfig(logit_stride=2).stride == 16


def test_nearest_final_upsample_is_piecewise_constant(rng):
    cfg = VisualConfig(widths=(4, 5, 6, 7), fpn_width=4, final_upsample="nearest")
    dec = FpnDecoder(rng, cfg)
    levels = Backbone(rng, cfg.widths)(_frames(rng, t=1))
    out = dec(levels[-1], levels).data[0, 0]
    assert np.array_equal(out[0::4, 0::4], out[3::4, 3::4])


def test_encoder_deterministic(rng):
    cfg = VisualConfig(widths=(4, 5, 6, 8), transformer_layers=1, heads=2)
    x = _frames(rng, t=1)
    a = VisualEncoder(cfg, np.random.default_rng(3))(x)[0].data
    b = VisualEncoder(cfg, np.random.default_rng(3))(x)[0].data
    assert np.array_equal(a, b)


def test_small_backbone_gradients():
    r = np.random.default_rng(5)
    bb = Backbone(r, (3, 4))
    for p in bb.parameters():
        if p.ndim == 3:
            p.data[:] = r.normal(0, 0.5, size=p.shape)
    x = Tensor(r.uniform(size=(1, 3, 8, 16)))
    w = r.normal(size=(1, 4, 2, 4))
    rep = grad_check(lambda *_: (bb(x)[-1] * Tensor(w)).sum(), bb.parameters(), max_coords=6, floor=1e-5)
    assert rep.passed, rep.failures
