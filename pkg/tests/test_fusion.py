import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import attention_oracle, layer_norm_oracle
from speechprior.errors import ConfigError, DataError
from speechprior.fusion import Fusion, FusionConfig, fuse


def _streams(t=5, dp=4, da=6, seed=0):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(t, dp, generator=g, dtype=torch.float64),
            torch.randn(t, da, generator=g, dtype=torch.float64))


def make(scheme, dp=4, da=6, heads=1, seed=0):
    torch.manual_seed(seed)
    return Fusion(FusionConfig(scheme, dp, da, n_heads=heads)).double()


def test_add_zero_acoustic_is_identity():
    p, _ = _streams()
    f = make("Add")
    assert torch.equal(f(p, torch.zeros(5, 6, dtype=torch.float64)), p)


def test_add_is_linear_in_acoustic():
    p, a1 = _streams(seed=1)
    _, a2 = _streams(seed=2)
    f = make("Add")
    with torch.no_grad():
        lhs = f(p, a1 + a2) - f(p, a2)
        np.testing.assert_allclose(lhs.numpy(), f.proj(a1).numpy(), atol=1e-12)


def test_cat_layout():
    p, a = _streams()
    f = make("Cat")
    out = f(p, a)
    assert out.shape == (5, 8)
    assert torch.equal(out[:, :4], f.proj(a))
    assert torch.equal(out[:, 4:], p)
    assert f.out_dim == 8


def test_film_identity_configuration():
    p, a = _streams()
    f = make("FiLM")
    with torch.no_grad():
        f.gamma.weight.zero_()
        f.gamma.bias.fill_(1.0)
        f.beta.weight.zero_()
        f.beta.bias.zero_()
    assert torch.equal(f(p, a), p)


def test_none_routes_phonetic_only():
    p, a = _streams()
    assert torch.equal(make("none")(p, a), p)


def test_cross_attention_matches_loop_oracle():
    t, d = 3, 4
    f = make("CrossAttention", dp=d, da=d, heads=1)
    blk = f.block
    # hand-set weights
    with torch.no_grad():
        f.proj.weight.copy_(torch.eye(d, dtype=torch.float64))
        for i, lin in enumerate((blk.q_proj, blk.k_proj, blk.v_proj)):
            lin.weight.copy_(torch.arange(d * d, dtype=torch.float64).view(d, d) / (10 * (i + 1)) - 0.5)
            lin.bias.copy_(torch.linspace(-0.2, 0.2, d, dtype=torch.float64) * (i + 1))
    p, a = _streams(t, d, d, seed=3)
    with torch.no_grad():
        _, ctx = blk.attend(a.unsqueeze(0), p.unsqueeze(0))
    w = lambda m: m.weight.tolist()
    bias = lambda m: m.bias.tolist()
    want = attention_oracle(a.tolist(), p.tolist(), w(blk.q_proj), bias(blk.q_proj),
                            w(blk.k_proj), bias(blk.k_proj), w(blk.v_proj), bias(blk.v_proj))
    np.testing.assert_allclose(ctx[0, 0].numpy(), np.array(want), atol=1e-6)

    # whole block: pre-norm attention residual then pre-norm feed-forward residual
    with torch.no_grad():
        out = f(p, a).numpy()
    qn = layer_norm_oracle(a.tolist(), blk.norm_q.weight.tolist(), blk.norm_q.bias.tolist())
    kn = layer_norm_oracle(p.tolist(), blk.norm_kv.weight.tolist(), blk.norm_kv.bias.tolist())
    att = attention_oracle(qn, kn, w(blk.q_proj), bias(blk.q_proj), w(blk.k_proj),
                           bias(blk.k_proj), w(blk.v_proj), bias(blk.v_proj))
    wo, bo = w(blk.out_proj), bias(blk.out_proj)
    x = [[a[i, o].item() + sum(wo[o][c] * att[i][c] for c in range(d)) + bo[o] for o in range(d)]
         for i in range(t)]
    hn = layer_norm_oracle(x, blk.norm_ffn.weight.tolist(), blk.norm_ffn.bias.tolist())
    w1, b1 = w(blk.ffn[0]), bias(blk.ffn[0])
    w2, b2 = w(blk.ffn[2]), bias(blk.ffn[2])
    gelu = lambda z: 0.5 * z * (1 + math.erf(z / math.sqrt(2)))
    for i in range(t):
        hid = [gelu(sum(w1[o][c] * hn[i][c] for c in range(d)) + b1[o]) for o in range(len(w1))]
        y = [x[i][o] + sum(w2[o][c] * hid[c] for c in range(len(hid))) + b2[o] for o in range(d)]
        np.testing.assert_allclose(out[i], y, atol=1e-6)


@given(st.integers(1, 4), st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_attention_context_in_value_envelope(t, seed):
    f = make("CrossAttention", dp=8, da=8, heads=2, seed=seed)
    p, a = _streams(t, 8, 8, seed=seed)
    with torch.no_grad():
        weights, ctx = f.block.attend(a.unsqueeze(0), p.unsqueeze(0))
        v = f.block.v_proj(p).view(t, 2, 4).transpose(0, 1)  # [H, T, d]
    assert torch.allclose(weights.sum(-1), torch.ones_like(weights.sum(-1)))
    lo, hi = v.min(dim=1, keepdim=True).values, v.max(dim=1, keepdim=True).values
    assert torch.all(ctx[0] >= lo - 1e-12) and torch.all(ctx[0] <= hi + 1e-12)


@pytest.mark.parametrize("scheme", ["Add", "Cat", "CrossAttention", "FiLM", "none"])
def test_schemes_preserve_frames_and_inputs(scheme):
    p, a = _streams(7, 8, 6)
    p0, a0 = p.clone(), a.clone()
    f = make(scheme, dp=8, da=6, heads=8 if scheme == "CrossAttention" else 1)
    out = f(p, a)
    assert out.shape == (7, f.out_dim)
    assert torch.equal(p, p0) and torch.equal(a, a0)
    batched = f(p.unsqueeze(0).repeat(2, 1, 1), a.unsqueeze(0).repeat(2, 1, 1))
    assert batched.shape == (2, 7, f.out_dim)


def test_errors():
    with pytest.raises(ConfigError):
        FusionConfig("Sum")
    with pytest.raises(ConfigError):
        FusionConfig("CrossAttention", d_phonetic=10, n_heads=8)
    f = make("Add")
    p, a = _streams()
    with pytest.raises(DataError):
        f(p[:4], a)
    with pytest.raises(DataError):
        f(p, a[:, :5])


def test_functional_entry_point():
    p, a = _streams()
    f = make("Add")
    assert torch.equal(fuse(p, a, f.cfg, f), f(p, a))
    assert FusionConfig().n_heads == 8 and FusionConfig().scheme == "Add"
