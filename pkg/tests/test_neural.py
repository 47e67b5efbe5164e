import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cgmjepa import neural
from cgmjepa.neural import (Block, EncoderConfig, MultiHeadSelfAttention, OptimState, PatchEmbed,
                            PatchEncoder, Predictor, PredictorConfig, adam_step, ema_update, lr_at,
                            sinusoidal_positions, warmup_end)


def _fd_check(fn, params, eps=1e-6):
    """Max relative error between autograd and central differences over params."""
    loss = fn()
    ad = neural.backward(loss, params)
    worst = 0.0
    for p, g in zip(params, ad):
        fd = torch.empty_like(p)
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            up = fn().item()
            flat[i] = old - eps
            down = fn().item()
            flat[i] = old
            fd.view(-1)[i] = (up - down) / (2 * eps)
        worst = max(worst, float((g - fd).norm()) / max(float(g.norm()), float(fd.norm()), 1e-12))
    return worst


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(embed_dim=10, heads=3)
    with pytest.raises(ValueError):
        EncoderConfig(dropout=0.1)
    with pytest.raises(ValueError):
        PredictorConfig(embed_dim=5, heads=2)


def test_patch_embed_linearity():
    torch.manual_seed(0)
    cfg = EncoderConfig(bias=False)
    emb = PatchEmbed(cfg)
    assert torch.all(emb(torch.zeros(2, 24, 12)) == 0)
    x = torch.rand(1, 5, 12, dtype=torch.float64) * 200
    emb = emb.double()
    torch.testing.assert_close(emb(3.5 * x), 3.5 * emb(x))
    assert PatchEncoder(EncoderConfig())(torch.rand(2, 7, 12)).shape == (2, 7, 96)


def test_patch_embed_matches_explicit_convolution():
    torch.manual_seed(1)
    emb = PatchEmbed(EncoderConfig(embed_dim=4, heads=2)).double()
    x = torch.rand(1, 1, 12, dtype=torch.float64) * 100
    w, b = emb.conv.weight.detach(), emb.conv.bias.detach()
    xs = np.pad(x.numpy().ravel() * 0.01, 1)
    ref = np.array([[sum(w[c, 0, k].item() * xs[i + k] for k in range(3)) + b[c].item()
                     for i in range(12)] for c in range(4)]).mean(axis=1)
    np.testing.assert_allclose(emb(x).detach().numpy().ravel(), ref, atol=1e-12)


def test_sinusoidal_positions():
    pe = sinusoidal_positions(24, 96, torch.float64)
    expected0 = torch.tensor([0.0, 1.0] * 48, dtype=torch.float64)
    torch.testing.assert_close(pe[0], expected0)
    assert pe.abs().max() <= 1.0
    d = torch.cdist(pe, pe)
    assert (d + torch.eye(24, dtype=torch.float64)).min() > 1e-3
    assert sinusoidal_positions(4, 7).shape == (4, 7)


def test_attention_rows_sum_to_one_and_single_token():
    torch.manual_seed(2)
    att = MultiHeadSelfAttention(8, 2).double()
    x = torch.randn(3, 5, 8, dtype=torch.float64)
    _, w = att(x, return_weights=True)
    torch.testing.assert_close(w.sum(-1), torch.ones(3, 2, 5, dtype=torch.float64))
    one = torch.randn(1, 1, 8, dtype=torch.float64)
    v = att.qkv(one)[..., 16:]
    torch.testing.assert_close(att(one), att.proj(v))


def test_block_permutation_equivariance():
    torch.manual_seed(3)
    blk = Block(8, 2).double()
    x = torch.randn(2, 6, 8, dtype=torch.float64)
    perm = torch.randperm(6)
    torch.testing.assert_close(blk(x)[:, perm], blk(x[:, perm]))


def test_layernorm_standardises():
    ln = torch.nn.LayerNorm(16).double()
    y = ln(torch.randn(4, 16, dtype=torch.float64) * 7 + 3)
    assert y.mean(-1).abs().max() < 1e-6
    assert (y.var(-1, unbiased=False) - 1).abs().max() < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_layer_gradients_match_finite_differences(seed):
    torch.manual_seed(seed)
    x = torch.randn(2, 3, 8, dtype=torch.float64)
    for mod in (Block(8, 2).double(), MultiHeadSelfAttention(8, 2).double(), torch.nn.LayerNorm(8).double()):
        params = list(mod.parameters())
        assert _fd_check(lambda: (mod(x) ** 2).sum(), params) < 1e-4
    pe = PatchEmbed(EncoderConfig(embed_dim=4, heads=2)).double()
    tok = torch.rand(2, 3, 12, dtype=torch.float64) * 300
    assert _fd_check(lambda: pe(tok).sin().sum(), list(pe.parameters())) < 1e-4


def test_predictor_shapes():
    torch.manual_seed(4)
    pred = Predictor(96, PredictorConfig())
    ctx = torch.randn(2, 18, 96)
    vis = torch.arange(18).expand(2, 18)
    tgt = torch.arange(18, 24).expand(2, 6)
    assert pred(ctx, vis, tgt).shape == (2, 6, 96)


def test_encoder_rejects_too_many_patches():
    with pytest.raises(ValueError):
        PatchEncoder(EncoderConfig(max_patches=4))(torch.zeros(1, 5, 12))


def test_backward_sum_gives_ones_and_rejects_nan():
    p = torch.nn.Parameter(torch.randn(3, 2))
    unused = torch.nn.Parameter(torch.randn(2))
    g = neural.backward(p.sum(), [p, unused])
    assert torch.all(g[0] == 1) and torch.all(g[1] == 0)
    with pytest.raises(neural.NonFiniteError):
        neural.backward(p.sum() * float("nan"), [p])


def test_lr_schedule():
    opt = OptimState()
    total = 1000
    w = warmup_end(total, 0.15)
    assert w == 150
    assert lr_at(0, total, opt) == 0.0
    assert lr_at(w, total, opt) == pytest.approx(1e-4)
    assert lr_at(w + 99, total, opt) == pytest.approx(1e-4)
    assert lr_at(w + 100, total, opt) == pytest.approx(0.99e-4)
    assert lr_at(75, total, opt) == pytest.approx(0.5e-4)
    with pytest.raises(ValueError):
        lr_at(total, total, opt)


def test_adam_zero_gradient_noop():
    p = [torch.nn.Parameter(torch.randn(4))]
    before = p[0].detach().clone()
    adam_step(p, [torch.zeros(4)], OptimState(total_steps=10), lr=1e-3)
    assert torch.equal(p[0].detach(), before)


def test_adam_clip_scales_by_half():
    grads = [torch.tensor([1.2, 0.0]), torch.tensor([1.6])]
    clipped, norm = neural.clip_by_global_norm(grads, 1.0)
    assert norm == pytest.approx(2.0)
    torch.testing.assert_close(clipped[0], torch.tensor([0.6, 0.0]))
    torch.testing.assert_close(clipped[1], torch.tensor([0.8]))


def test_adam_first_step_closed_form():
    p = torch.nn.Parameter(torch.zeros(3, dtype=torch.float64))
    g = torch.tensor([0.3, -0.2, 0.1], dtype=torch.float64)
    adam_step([p], [g], OptimState(clip_norm=10.0, total_steps=10), lr=1e-3)
    # m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
    expected = -1e-3 * g / (g.abs() + 1e-8)
    torch.testing.assert_close(p.detach(), expected)


def test_adam_matches_reference_implementation():
    """Against torch.optim.Adam with the same (already clipped) gradients."""
    torch.manual_seed(5)
    a = torch.nn.Parameter(torch.randn(5, dtype=torch.float64))
    b = torch.nn.Parameter(a.detach().clone())
    ref = torch.optim.Adam([b], lr=1e-2, betas=(0.9, 0.999), eps=1e-8)
    opt = OptimState(clip_norm=1e9, total_steps=100)
    for _ in range(20):
        g = torch.randn(5, dtype=torch.float64)
        adam_step([a], [g], opt, lr=1e-2)
        b.grad = g.clone()
        ref.step()
    torch.testing.assert_close(a.detach(), b.detach(), rtol=1e-12, atol=1e-14)


def test_adam_rejects_nonfinite():
    with pytest.raises(neural.NonFiniteError):
        adam_step([torch.nn.Parameter(torch.zeros(2))], [torch.tensor([1.0, float("inf")])],
                  OptimState(total_steps=2))


def test_ema_examples():
    t = [torch.zeros(3)]
    ema_update(t, [torch.ones(3)], 0.997)
    torch.testing.assert_close(t[0], torch.full((3,), 0.003))
    t = [torch.full((2,), 5.0)]
    ema_update(t, [torch.ones(2)], 1.0)
    assert torch.all(t[0] == 5.0)
    ema_update(t, [torch.ones(2)], 0.0)
    assert torch.all(t[0] == 1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 0.99), st.integers(0, 2 ** 31))
def test_ema_contraction(m, seed):
    g = torch.Generator().manual_seed(seed)
    t = torch.randn(6, generator=g, dtype=torch.float64)
    c = torch.randn(6, generator=g, dtype=torch.float64)
    before = (t - c).abs()
    ema_update([t], [c], m)
    torch.testing.assert_close((t - c).abs(), m * before, rtol=1e-12, atol=1e-14)


def test_sinusoid_frequencies_geometric():
    pe = sinusoidal_positions(2, 8, torch.float64)
    w = [math.exp(-math.log(10000.0) * i / 8) for i in (0, 2, 4, 6)]
    torch.testing.assert_close(pe[1, 0::2], torch.tensor([math.sin(x) for x in w], dtype=torch.float64))
