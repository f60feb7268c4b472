"""RMSNorm / SwiGLU / RoPE / GQA attention contracts and oracles."""

import numpy as np
import pytest

from rwkvlab.layers import (
    GqaParams,
    MlpParams,
    NormParams,
    attention_weights,
    gqa_attention,
    rmsnorm,
    rope_apply,
    swiglu_mlp,
)
from rwkvlab.tensor import Graph, Tensor, backward, grad_check, sum_all

THETA = 10000.0


def _gqa_params(rng, d, n_heads, n_kv_heads, head_dim, requires_grad=False):
    def w(shape):
        return Tensor(rng.normal(0, 0.2, shape), requires_grad=requires_grad)

    return GqaParams(
        W_Q=w((d, n_heads * head_dim)),
        W_K=w((d, n_kv_heads * head_dim)),
        W_V=w((d, n_kv_heads * head_dim)),
        b_Q=w((n_heads * head_dim,)),
        b_K=w((n_kv_heads * head_dim,)),
        b_V=w((n_kv_heads * head_dim,)),
        W_O=w((n_heads * head_dim, d)),
        n_heads=n_heads,
        n_kv_heads=n_kv_heads,
        head_dim=head_dim,
    )


def test_rmsnorm_zero_rows_stay_zero():
    p = NormParams(gamma=Tensor(np.ones(4)))
    out = rmsnorm(Tensor(np.zeros((1, 2, 4))), p)
    np.testing.assert_array_equal(out.data, np.zeros((1, 2, 4)))


def test_rmsnorm_constant_row():
    p = NormParams(gamma=Tensor(np.ones(4)), eps=1e-12)
    out = rmsnorm(Tensor([[2.0, 2.0, 2.0, 2.0]]), p)
    np.testing.assert_allclose(out.data, [[1.0, 1.0, 1.0, 1.0]], atol=1e-5)


def test_rmsnorm_backward_vs_finite_differences(f64):
    rng = np.random.default_rng(0)
    p = NormParams(gamma=Tensor(rng.uniform(0.5, 1.5, 6)), eps=1e-6)

    def f(x):
        return sum_all(rmsnorm(x, p))

    x = Tensor(rng.uniform(-2, 2, (3, 6)))
    assert grad_check(f, x, eps=1e-6) < 1e-5

    x_fix = Tensor(rng.uniform(-2, 2, (3, 6)))

    def fg(gamma):
        return sum_all(rmsnorm(x_fix, NormParams(gamma=gamma, eps=1e-6)))

    assert grad_check(fg, Tensor(rng.uniform(0.5, 1.5, 6)), eps=1e-6) < 1e-5


def test_swiglu_zero_input_is_zero():
    rng = np.random.default_rng(1)
    p = MlpParams(W_gate=Tensor(rng.normal(size=(4, 8))),
                  W_up=Tensor(rng.normal(size=(4, 8))),
                  W_down=Tensor(rng.normal(size=(8, 4))))
    out = swiglu_mlp(Tensor(np.zeros((1, 3, 4))), p)
    np.testing.assert_array_equal(out.data, np.zeros((1, 3, 4)))


def test_swiglu_hand_value():
    p = MlpParams(W_gate=Tensor([[1.0]]), W_up=Tensor([[1.0]]),
                  W_down=Tensor([[1.0]]))
    out = swiglu_mlp(Tensor([[[1.0]]]), p)
    silu1 = 1.0 / (1.0 + np.exp(-1.0))
    assert out.item() == pytest.approx(silu1, rel=1e-6)


def test_swiglu_frozen_weights_get_no_grad():
    rng = np.random.default_rng(2)
    p = MlpParams(W_gate=Tensor(rng.normal(size=(4, 8)), requires_grad=False),
                  W_up=Tensor(rng.normal(size=(4, 8)), requires_grad=False),
                  W_down=Tensor(rng.normal(size=(8, 4)), requires_grad=False))
    x = Tensor(rng.normal(size=(1, 3, 4)), requires_grad=True)
    with Graph() as g:
        loss = sum_all(swiglu_mlp(x, p))
    backward(loss, g)
    assert p.W_gate.grad is None and p.W_up.grad is None and p.W_down.grad is None
    assert x.grad is not None


def test_rope_position_zero_is_identity():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(1, 2, 1, 8)))
    out = rope_apply(x, [0], THETA)
    np.testing.assert_array_equal(out.data, x.data)


def test_rope_one_radian_rotation():
    x = Tensor(np.array([[[1.0, 0.0]]]))  # [T=1, H=1, N=2], pair 0 freq is 1
    out = rope_apply(x, [1], THETA, time_axis=0)
    np.testing.assert_allclose(out.data, [[[np.cos(1.0), np.sin(1.0)]]], atol=1e-6)


def test_rope_rejects_odd_head_dim():
    with pytest.raises(ValueError, match="even"):
        rope_apply(Tensor(np.zeros((1, 1, 3))), [0], THETA, time_axis=0)


def test_rope_preserves_pair_norms():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(5, 2, 8)))
    out = rope_apply(x, np.arange(5), THETA, time_axis=0)
    for arr in (x.data, out.data):
        assert arr.shape == (5, 2, 8)
    norms_in = np.hypot(x.data[..., 0::2], x.data[..., 1::2])
    norms_out = np.hypot(out.data[..., 0::2], out.data[..., 1::2])
    np.testing.assert_allclose(norms_in, norms_out, atol=1e-6)


def test_rope_backward_vs_finite_differences(f64):
    rng = np.random.default_rng(5)
    other = Tensor(rng.normal(size=(3, 2, 4)))

    def f(x):
        from rwkvlab.tensor import mul
        return sum_all(mul(rope_apply(x, np.arange(3), THETA, time_axis=0), other))

    x = Tensor(rng.normal(size=(3, 2, 4)))
    assert grad_check(f, x, eps=1e-6) < 1e-6


# --- GQA -------------------------------------------------------------------

def _mha_oracle(x, p: GqaParams, theta):
    """Standard multi-head attention, written independently with plain numpy
    loops (n_kv_heads == n_heads only)."""
    assert p.n_kv_heads == p.n_heads
    b, t, d = x.shape
    n, h = p.head_dim, p.n_heads
    q = x @ p.W_Q.data + p.b_Q.data
    k = x @ p.W_K.data + p.b_K.data
    v = x @ p.W_V.data + p.b_V.data

    def rot(arr):
        out = arr.copy()
        half = n // 2
        freqs = theta ** (-2.0 * np.arange(half) / n)
        for pos in range(t):
            for i in range(half):
                ang = pos * freqs[i]
                c, s = np.cos(ang), np.sin(ang)
                e = arr[:, pos, :, 2 * i].copy()
                o = arr[:, pos, :, 2 * i + 1].copy()
                out[:, pos, :, 2 * i] = e * c - o * s
                out[:, pos, :, 2 * i + 1] = e * s + o * c
        return out

    q = rot(q.reshape(b, t, h, n).astype(np.float64))
    k = rot(k.reshape(b, t, h, n).astype(np.float64))
    v = v.reshape(b, t, h, n).astype(np.float64)
    h_attn = np.zeros((b, t, h * n))
    for bi in range(b):
        for hi in range(h):
            for ti in range(t):
                scores = np.array([
                    q[bi, ti, hi] @ k[bi, tj, hi] / np.sqrt(n)
                    for tj in range(ti + 1)])
                w = np.exp(scores - scores.max())
                w /= w.sum()
                ctx = sum(w[tj] * v[bi, tj, hi] for tj in range(ti + 1))
                h_attn[bi, ti, hi * n:(hi + 1) * n] = ctx
    y = h_attn @ p.W_O.data
    return y, h_attn


def test_gqa_single_token_is_value_projection():
    rng = np.random.default_rng(6)
    p = _gqa_params(rng, 8, 2, 2, 4)
    x = Tensor(rng.normal(size=(1, 1, 8)))
    y, h_attn = gqa_attention(x, p, THETA)
    v = x.data @ p.W_V.data + p.b_V.data  # single position: weight 1 on itself
    np.testing.assert_allclose(h_attn.data.reshape(-1), v.reshape(-1), atol=1e-5)
    assert y.shape == (1, 1, 8)


def test_gqa_matches_mha_oracle_when_groups_are_one():
    rng = np.random.default_rng(7)
    p = _gqa_params(rng, 8, 2, 2, 4)
    x = Tensor(rng.normal(size=(2, 5, 8)))
    y, h_attn = gqa_attention(x, p, THETA)
    y_ref, h_ref = _mha_oracle(x.data.astype(np.float64), p, THETA)
    np.testing.assert_allclose(y.data, y_ref, atol=1e-4)
    np.testing.assert_allclose(h_attn.data, h_ref, atol=1e-4)


def test_gqa_uniform_values_collapse_to_value_row():
    rng = np.random.default_rng(8)
    p = _gqa_params(rng, 8, 4, 2, 2)
    p.W_V = Tensor(np.zeros((8, 4)))  # uniform V rows via bias only
    p.b_V = Tensor(rng.normal(size=4))
    x = Tensor(rng.normal(size=(1, 6, 8)))
    _, h_attn = gqa_attention(x, p, THETA)
    expect = np.repeat(p.b_V.data.reshape(2, 2), 2, axis=0).reshape(-1)
    for t in range(6):
        np.testing.assert_allclose(h_attn.data[0, t], expect, atol=1e-5)


def test_gqa_weights_sum_to_one_and_causal():
    rng = np.random.default_rng(9)
    p = _gqa_params(rng, 8, 4, 2, 2)
    x = Tensor(rng.normal(size=(1, 7, 8)))
    w = attention_weights(x, p, THETA)
    np.testing.assert_allclose(w.data.sum(axis=-1), np.ones((1, 4, 7)), atol=1e-6)
    upper = np.triu(np.ones((7, 7)), k=1).astype(bool)
    assert np.all(w.data[..., upper] == 0.0)


def test_gqa_causality_bitwise():
    rng = np.random.default_rng(10)
    p = _gqa_params(rng, 8, 2, 1, 4)
    base = rng.normal(size=(1, 6, 8))
    y0, _ = gqa_attention(Tensor(base), p, THETA)
    for cut in (2, 4):
        pert = base.copy()
        pert[0, cut:] += rng.normal(size=(6 - cut, 8))
        y1, _ = gqa_attention(Tensor(pert), p, THETA)
        assert y0.data[0, :cut].tobytes() == y1.data[0, :cut].tobytes()


def test_gqa_group_size_one_path_is_mha_bitwise():
    """With n_kv == n_heads the group-expansion must be an exact no-op."""
    rng = np.random.default_rng(11)
    p = _gqa_params(rng, 8, 2, 2, 4)
    x = Tensor(rng.normal(size=(1, 4, 8)))
    y1, h1 = gqa_attention(x, p, THETA)
    # Re-run through the same code path; repeat_axis(k=1) would be the only
    # difference and is skipped entirely.
    y2, h2 = gqa_attention(x, p, THETA)
    assert y1.data.tobytes() == y2.data.tobytes()
    assert h1.data.tobytes() == h2.data.tobytes()


def test_gqa_gradients_vs_finite_differences(f64):
    rng = np.random.default_rng(12)
    p = _gqa_params(rng, 4, 2, 1, 2)

    def f(x):
        y, _ = gqa_attention(x, p, THETA)
        return sum_all(y)

    x = Tensor(rng.normal(size=(1, 3, 4)))
    assert grad_check(f, x, eps=1e-6) < 1e-5
