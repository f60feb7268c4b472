"""Qwen-style building blocks kept by the conversion: RMSNorm, SwiGLU MLP,
RoPE, and causal grouped-query attention with QKV biases.

All functions are pure in the parameters and operate on [B, T, d] activations
(batch axis mandatory; use B=1 for single sequences).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .precision import active_dtype
from .tensor import (
    Tensor,
    _emit,
    add,
    add_row,
    constant,
    matmul,
    mul,
    repeat_axis,
    reshape,
    scale,
    silu,
    softmax_rows,
    swap_axes,
)

_MASK_FILL = -1e9  # finite stand-in for -inf; underflows to exactly 0 in softmax


@dataclass
class NormParams:
    gamma: Tensor  # [d]
    eps: float = 1e-6

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError(f"norm eps must be positive, got {self.eps}")


@dataclass
class MlpParams:
    W_gate: Tensor  # [d, d_ffn]
    W_up: Tensor    # [d, d_ffn]
    W_down: Tensor  # [d_ffn, d]


@dataclass
class GqaParams:
    W_Q: Tensor  # [d, H*N]
    W_K: Tensor  # [d, Hkv*N]
    W_V: Tensor  # [d, Hkv*N]
    b_Q: Tensor  # [H*N]
    b_K: Tensor  # [Hkv*N]
    b_V: Tensor  # [Hkv*N]
    W_O: Tensor  # [H*N, d]
    n_heads: int
    n_kv_heads: int
    head_dim: int

    def __post_init__(self):
        if self.n_heads % self.n_kv_heads != 0:
            raise ValueError(
                f"n_heads ({self.n_heads}) not divisible by n_kv_heads ({self.n_kv_heads})")

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads


def rmsnorm(x: Tensor, p: NormParams) -> Tensor:
    """y[t] = x[t] / sqrt(mean(x[t]^2) + eps) * gamma, rows on the last axis."""
    if x.shape[-1] != p.gamma.shape[0]:
        raise ValueError(f"rmsnorm width mismatch: {x.shape} vs gamma {p.gamma.shape}")
    d = x.shape[-1]
    ms = (x.data ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + p.eps)
    normed = x.data * inv
    out_data = normed * p.gamma.data

    def bwd(g, needs):
        gx = None
        if needs[0]:
            gg = g * p.gamma.data
            gx = inv * (gg - normed * ((gg * normed).sum(axis=-1, keepdims=True) / d))
        ggamma = (g * normed).reshape(-1, d).sum(axis=0) if needs[1] else None
        return gx, ggamma

    return _emit("rmsnorm", (x, p.gamma), out_data, bwd)


def swiglu_mlp(x: Tensor, p: MlpParams) -> Tensor:
    """(silu(x W_gate) * (x W_up)) W_down, bias-free."""
    return matmul(mul(silu(matmul(x, p.W_gate)), matmul(x, p.W_up)), p.W_down)


def rope_apply(x: Tensor, positions, theta: float, time_axis: int = -2) -> Tensor:
    """Pairwise rotations: pair i of each head vector rotated by
    pos * theta^(-2i/head_dim). Position 0 is the identity.

    `time_axis` indexes the sequence dimension; the last axis is the head
    dimension and must be even.
    """
    n = x.shape[-1]
    if n % 2 != 0:
        raise ValueError(f"rope needs an even head_dim, got {n}")
    positions = np.asarray(positions, dtype=np.float64)
    t_ax = time_axis % x.ndim
    if positions.shape != (x.shape[t_ax],):
        raise ValueError(
            f"rope positions length {positions.shape} != axis extent {x.shape[t_ax]}")
    half = n // 2
    freqs = theta ** (-2.0 * np.arange(half) / n)  # [half]
    angles = positions[:, None] * freqs[None, :]   # [T, half]
    shape = [1] * x.ndim
    shape[t_ax] = x.shape[t_ax]
    shape[-1] = half
    dt = x.data.dtype
    cos = np.cos(angles).astype(dt).reshape(shape)
    sin = np.sin(angles).astype(dt).reshape(shape)

    xe = x.data[..., 0::2]
    xo = x.data[..., 1::2]
    out_data = np.empty_like(x.data)
    out_data[..., 0::2] = xe * cos - xo * sin
    out_data[..., 1::2] = xe * sin + xo * cos

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        ge = g[..., 0::2]
        go = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin   # rotate grad by -angle
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    return _emit("rope", (x,), out_data, bwd)


def causal_mask(seq_len: int) -> Tensor:
    """[T, T] additive mask: 0 on/below the diagonal, large negative above."""
    m = np.triu(np.full((seq_len, seq_len), _MASK_FILL, dtype=active_dtype()), k=1)
    return constant(m)


def _split_heads(x: Tensor, n_heads: int, head_dim: int) -> Tensor:
    """[B, T, H*N] -> [B, H, T, N]."""
    b, t, _ = x.shape
    return swap_axes(reshape(x, (b, t, n_heads, head_dim)), 1, 2)


def _merge_heads(x: Tensor) -> Tensor:
    """[B, H, T, N] -> [B, T, H*N]."""
    b, h, t, n = x.shape
    return reshape(swap_axes(x, 1, 2), (b, t, h * n))


def _gqa_qkv(x: Tensor, p: GqaParams, theta: float, positions):
    """Rotated per-head projections: Q [B,H,T,N] and group-expanded K, V."""
    q = _split_heads(add_row(matmul(x, p.W_Q), p.b_Q), p.n_heads, p.head_dim)
    k = _split_heads(add_row(matmul(x, p.W_K), p.b_K), p.n_kv_heads, p.head_dim)
    v = _split_heads(add_row(matmul(x, p.W_V), p.b_V), p.n_kv_heads, p.head_dim)
    q = rope_apply(q, positions, theta)
    k = rope_apply(k, positions, theta)
    if p.group_size > 1:
        k = repeat_axis(k, 1, p.group_size)  # query head i uses kv head i//g
        v = repeat_axis(v, 1, p.group_size)
    return q, k, v


def attention_weights(x: Tensor, p: GqaParams, theta: float) -> Tensor:
    """Post-softmax causal attention weights [B, H, T, T] (diagnostics)."""
    b, t, _ = x.shape
    positions = np.arange(t)
    q, k, _ = _gqa_qkv(x, p, theta, positions)
    scores = scale(matmul(q, swap_axes(k, -1, -2)), 1.0 / np.sqrt(p.head_dim))
    mask = constant(np.broadcast_to(causal_mask(t).data, scores.shape).copy())
    return softmax_rows(add(scores, mask))


def gqa_attention(x: Tensor, p: GqaParams, theta: float) -> tuple[Tensor, Tensor]:
    """Causal grouped-query attention.

    Returns (y, h_attn): y = h_attn @ W_O is the residual-branch output and
    h_attn the pre-W_O concatenation of head outputs.
    """
    b, t, _ = x.shape
    positions = np.arange(t)
    q, k, v = _gqa_qkv(x, p, theta, positions)
    scores = scale(matmul(q, swap_axes(k, -1, -2)), 1.0 / np.sqrt(p.head_dim))
    mask = constant(np.broadcast_to(causal_mask(t).data, scores.shape).copy())
    attn = softmax_rows(add(scores, mask))
    h_attn = _merge_heads(matmul(attn, v))
    return matmul(h_attn, p.W_O), h_attn
