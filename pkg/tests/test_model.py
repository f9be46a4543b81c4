import math

import numpy as np
import pytest

from davit import autodiff as ad
from davit import model as md
from conftest import check_grads, rel_err
from test_autodiff import conv_loops


def toy_config():
    return md.ModelConfig(
        input_size=16,
        num_classes=3,
        stages=[
            md.StageConfig(7, 4, 3, 4, 1, 2, 2),
            md.StageConfig(2, 2, 0, 8, 1, 2, 4),
        ],
    )


# ---------------------------------------------------------------------------
# geometry


def test_default_stage_sizes_are_table_values():
    cfg = md.default_config()
    assert md.stage_output_sizes(cfg) == [75, 38, 19, 10]


def test_patch_embed_300_to_75():
    cfg = md.default_config()
    m = md.build_model(cfg, seed=0)
    out = md.patch_embed(ad.zeros((1, 3, 300, 300)), m.stages[0], cfg.stages[0])
    assert out.shape == (1, 96, 75, 75)


def test_patch_embed_ceil_rule_75_to_38_and_19_to_10():
    s = md.StageConfig(2, 2, 0, 4, 1, 7, 2)
    sp = md.StageParams(ad.zeros((4, 2, 2, 2)), ad.zeros((4,)), [])
    assert md.patch_embed(ad.zeros((1, 2, 75, 75)), sp, s).shape == (1, 4, 38, 38)
    assert md.patch_embed(ad.zeros((1, 2, 38, 38)), sp, s).shape == (1, 4, 19, 19)
    assert md.patch_embed(ad.zeros((1, 2, 19, 19)), sp, s).shape == (1, 4, 10, 10)


def test_patch_embed_rejects_non_square():
    s = md.StageConfig(2, 2, 0, 4, 1, 7, 2)
    sp = md.StageParams(ad.zeros((4, 2, 2, 2)), ad.zeros((4,)), [])
    with pytest.raises(ValueError):
        md.patch_embed(ad.zeros((1, 2, 8, 10)), sp, s)


def test_config_validation():
    cfg = toy_config()
    cfg.stages[0].channels = 5  # not divisible by head_width 2
    with pytest.raises(ValueError):
        cfg.validate()
    cfg = toy_config()
    cfg.stages[1].depth = 0
    with pytest.raises(ValueError):
        cfg.validate()
    cfg = toy_config()
    cfg.input_size = 2
    cfg.stages[0].embed_pad = 1  # 7x7 kernel exceeds the padded 4x4 input
    with pytest.raises(ValueError):
        cfg.validate()


# ---------------------------------------------------------------------------
# construction


def test_build_deterministic_bitwise():
    cfg = toy_config()
    a = md.build_model(cfg, seed=7)
    b = md.build_model(cfg, seed=7)
    for name, t in a.named_parameters().items():
        assert (t.data == b.named_parameters()[name].data).all(), name
    c = md.build_model(cfg, seed=8)
    assert (a.named_parameters()["head.weight"].data != c.named_parameters()["head.weight"].data).any()


def test_toy_forward_finite_logits():
    cfg = md.ModelConfig(input_size=32, num_classes=10,
                         stages=[md.StageConfig(7, 4, 3, 8, 1, 4, 4),
                                 md.StageConfig(2, 2, 0, 16, 1, 4, 4)])
    m = md.build_model(cfg, seed=1)
    rng = np.random.default_rng(2)
    x = ad.Tensor(rng.uniform(0, 1, size=(2, 3, 32, 32)).astype(np.float32))
    logits = md.forward(m, x)
    assert logits.shape == (2, 10)
    assert np.isfinite(logits.data).all()


def test_forward_wrong_input_rejected():
    m = md.build_model(toy_config(), seed=0)
    with pytest.raises(ValueError):
        md.forward(m, ad.zeros((1, 3, 8, 8)))
    with pytest.raises(ValueError):
        md.forward(m, ad.zeros((1, 1, 16, 16)))


def test_count_params_formula_matches_construction():
    for cfg in (toy_config(), md.default_config(input_size=300)):
        m = md.build_model(cfg, seed=0)
        assert md.count_params(m) == md.count_params_formula(cfg)


def test_default_config_param_count_value():
    # Table-as-printed (every stage depth 1) comes to 20.41M parameters;
    # the published 48.98M implies deeper stages (see README).
    assert md.count_params_formula(md.default_config()) == 20_411_146


def test_single_linear_layer_count():
    assert 96 * 288 + 288 == 27_936


# ---------------------------------------------------------------------------
# block semantics


def test_block_preserves_shape():
    cfg = md.ModelConfig(input_size=24, num_classes=2,
                         stages=[md.StageConfig(4, 4, 0, 8, 1, 3, 4)])
    m = md.build_model(cfg, seed=3)
    x = ad.Tensor(np.random.default_rng(4).normal(size=(1, 6, 6, 8)).astype(np.float32))
    out = md.dual_attention_block(x, m.stages[0].blocks[0], cfg.stages[0])
    assert out.shape == (1, 6, 6, 8)


def test_zeroed_projections_make_block_identity():
    cfg = toy_config()
    m = md.build_model(cfg, seed=5)
    bp = m.stages[0].blocks[0]
    for t in (bp.spatial.proj_weight, bp.spatial.proj_bias,
              bp.channel.proj_weight, bp.channel.proj_bias,
              bp.ffn1.w2, bp.ffn1.b2, bp.ffn2.w2, bp.ffn2.b2):
        t.data[...] = 0.0
    x = np.random.default_rng(6).normal(size=(2, 4, 4, 4)).astype(np.float32)
    out = md.dual_attention_block(ad.Tensor(x.copy()), bp, cfg.stages[0])
    assert (out.data == x).all()


def test_end_to_end_gradient_fd():
    cfg = md.ModelConfig(input_size=8, num_classes=2, input_channels=1,
                         stages=[md.StageConfig(7, 4, 3, 4, 1, 2, 2)])
    m = md.build_model(cfg, seed=9, dtype=np.float64)
    rng = np.random.default_rng(10)
    x = rng.uniform(0, 1, size=(1, 1, 8, 8))
    gamma = m.head_norm.gamma.data.copy()
    hw = m.head_weight.data.copy()

    def build(ts):
        m.head_norm.gamma = ts[1]
        m.head_weight = ts[2]
        logits = md.forward(m, ts[0])
        return ad.tensor_sum(ad.mul(logits, logits))

    check_grads(build, [x, gamma, hw])


def test_full_block_gradient_fd():
    # one complete dual-attention block, differentiated end to end
    cfg = md.ModelConfig(input_size=16, num_classes=2,
                         stages=[md.StageConfig(4, 4, 0, 4, 1, 2, 2)])
    m = md.build_model(cfg, seed=11, dtype=np.float64)
    bp = m.stages[0].blocks[0]
    rng = np.random.default_rng(12)
    x = rng.normal(size=(1, 4, 4, 4))

    def build(ts):
        return ad.tensor_mean(md.dual_attention_block(ts[0], bp, cfg.stages[0]))

    check_grads(build, [x])


# ---------------------------------------------------------------------------
# full-scale forward and straight-line oracle


def test_default_forward_shape_and_duplicate_rows():
    cfg = md.default_config()
    m = md.build_model(cfg, seed=13)
    rng = np.random.default_rng(14)
    one = rng.uniform(0, 1, size=(1, 3, 300, 300)).astype(np.float32)
    batch = ad.Tensor(np.concatenate([one, one], axis=0))
    logits = md.forward(m, batch)
    assert logits.shape == (2, 10)
    assert (logits.data[0] == logits.data[1]).all()
    probs = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    assert np.abs(probs.sum(axis=1) - 1).max() < 1e-6


def sl_layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def sl_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sl_gelu(x):
    from scipy import special
    return 0.5 * x * (1.0 + special.erf(x / math.sqrt(2.0)))


def sl_block(x, bp, s, ffn_hidden):
    # straight-line dual attention block on a single B=1 map, no padding
    b, h, w, c = x.shape
    assert b == 1 and h % s.window_size == 0 and w % s.window_size == 0
    ws = s.window_size
    nh = c // s.head_width
    ch = s.head_width

    def spatial(xin, p):
        xw = xin.reshape(h // ws, ws, w // ws, ws, c).transpose(0, 2, 1, 3, 4).reshape(-1, ws * ws, c)
        qkv = xw @ p.qkv_weight.data + p.qkv_bias.data
        out = np.empty_like(xw)
        for t in range(xw.shape[0]):
            parts = []
            for head in range(nh):
                sl = slice(head * ch, (head + 1) * ch)
                q = qkv[t, :, :c][:, sl]
                k = qkv[t, :, c:2 * c][:, sl]
                v = qkv[t, :, 2 * c:][:, sl]
                parts.append(sl_softmax(q @ k.T / math.sqrt(ch)) @ v)
            out[t] = np.concatenate(parts, axis=1)
        out = out @ p.proj_weight.data + p.proj_bias.data
        return out.reshape(h // ws, w // ws, ws, ws, c).transpose(0, 2, 1, 3, 4).reshape(1, h, w, c)

    def channel(xin, p):
        cg = p.head_width
        same = (np.arange(c)[:, None] // cg) == (np.arange(c)[None, :] // cg)
        wq = p.qkv_weight.data * np.tile(same, (1, 3))
        wp = p.proj_weight.data * same
        tokens = xin.reshape(h * w, c)
        qkv = tokens @ wq + p.qkv_bias.data
        out = np.empty((h * w, c))
        for g in range(c // cg):
            sl = slice(g * cg, (g + 1) * cg)
            q = qkv[:, :c][:, sl].T
            k = qkv[:, c:2 * c][:, sl].T
            v = qkv[:, 2 * c:][:, sl].T
            out[:, sl] = (sl_softmax(q @ k.T / math.sqrt(cg)) @ v).T
        out = out @ wp + p.proj_bias.data
        return out.reshape(1, h, w, c)

    def ffn(xin, f):
        t = xin.reshape(-1, c)
        t = sl_gelu(t @ f.w1.data + f.b1.data)
        return (t @ f.w2.data + f.b2.data).reshape(1, h, w, c)

    x = x + spatial(sl_layer_norm(x, bp.norm1.gamma.data, bp.norm1.beta.data), bp.spatial)
    x = x + ffn(sl_layer_norm(x, bp.norm2.gamma.data, bp.norm2.beta.data), bp.ffn1)
    x = x + channel(sl_layer_norm(x, bp.norm3.gamma.data, bp.norm3.beta.data), bp.channel)
    x = x + ffn(sl_layer_norm(x, bp.norm4.gamma.data, bp.norm4.beta.data), bp.ffn2)
    return x


def test_forward_matches_straight_line_oracle():
    cfg = toy_config()
    m = md.build_model(cfg, seed=15, dtype=np.float64)
    rng = np.random.default_rng(16)
    img = rng.uniform(0, 1, size=(1, 3, 16, 16))

    got = md.forward(m, ad.Tensor(img.copy())).data

    # independent straight-line re-implementation on the same weights
    x = img
    for sp, s in zip(m.stages, cfg.stages):
        if s.embed_pad > 0:
            pad4 = (s.embed_pad,) * 4
        else:
            out_sz = -(-x.shape[2] // s.embed_stride)
            extra = max(0, (out_sz - 1) * s.embed_stride + s.embed_kernel - x.shape[2])
            pad4 = (0, extra, 0, extra)
        x = conv_loops(x, sp.embed_weight.data, s.embed_stride, pad4)
        x = x + sp.embed_bias.data[None, :, None, None]
        x = x.transpose(0, 2, 3, 1)
        for bp in sp.blocks:
            x = sl_block(x, bp, s, cfg.ffn_hidden(s.channels))
        x = x.transpose(0, 3, 1, 2)
    x = x.transpose(0, 2, 3, 1)
    x = sl_layer_norm(x, m.head_norm.gamma.data, m.head_norm.beta.data)
    x = x.mean(axis=(1, 2))
    want = x @ m.head_weight.data + m.head_bias.data

    assert rel_err(got, want) < 1e-6
