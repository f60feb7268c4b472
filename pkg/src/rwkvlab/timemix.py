"""RWKV-7 time mixing (the self-attention replacement) and the RWKV-6
recurrence kept as an ablation baseline.

State orientation, RWKV-7: per head a [value_dim x key_dim] matrix S with

    S_t = S_{t-1} (diag(w_t) - kappa_t^T (a_t * kappa_t)) + v_t^T k_t
    o_t = S_t r_t^T                      (receptance readout)

where kappa_t is unit-normalized per head, w_t in (0,1) channel-wise and a_t
(the in-context learning rate) in (0,1) or (0,2) depending on `a_range`.

RWKV-6 uses the transposed convention, decay on the left:

    S'_t = diag(w_t) S'_{t-1} + k_t^T v_t
    o_t = r_t S'_t

The whole-sequence scans are single autograd nodes with hand-derived reverse
passes (checked against finite differences); everything is vectorized over
batch and heads, sequential only over time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import (
    Tensor,
    _emit,
    add,
    add_row,
    constant,
    exp,
    matmul,
    mul,
    mul_row,
    normalize_rows,
    reshape,
    rows_l2_normalize,
    scale,
    shift_rows_down,
    sigmoid,
    sub,
)

KAPPA_EPS = 1e-8
GATE_BIAS_INIT = 16.0  # sigmoid(16) = 1 - 1.1e-7: gate starts at 1
GROUP_NORM_EPS = 1e-5


class RecurrenceError(FloatingPointError):
    """State blew up: non-finite entries during a scan."""


@dataclass
class TimeMixParams:
    W_r: Tensor                   # [d, H*N]
    W_k: Tensor                   # [d, H*N]
    W_v: Tensor                   # [d, H*N]
    W_w: Tensor                   # [d, H*N] decay projection
    W_O: Tensor                   # [H*N, d]
    token_shift_mix: Tensor       # [d], coefficients in [0, 1]
    n_heads: int
    head_dim: int
    kind: str = "rwkv7"           # rwkv7 | rwkv6
    gate_mode: str = "gated"      # gated | gate_free
    a_range: str = "unit"         # unit -> a in (0,1); extended -> (0,2)
    W_kappa: Optional[Tensor] = None  # [d, H*N], rwkv7 only
    W_a: Optional[Tensor] = None      # [d, H*N], rwkv7 only
    W_g: Optional[Tensor] = None      # [d, H*N], gated only
    b_g: Optional[Tensor] = None      # [H*N], gated only

    def __post_init__(self):
        if self.kind not in ("rwkv7", "rwkv6"):
            raise ValueError(f"unknown time-mix kind {self.kind!r}")
        if self.gate_mode not in ("gated", "gate_free"):
            raise ValueError(f"unknown gate_mode {self.gate_mode!r}")
        if self.a_range not in ("unit", "extended"):
            raise ValueError(f"unknown a_range {self.a_range!r}")
        if self.kind == "rwkv7" and (self.W_kappa is None or self.W_a is None):
            raise ValueError("rwkv7 time mixing needs W_kappa and W_a")
        if self.gate_mode == "gated" and (self.W_g is None or self.b_g is None):
            raise ValueError("gated mode needs W_g and b_g")
        if self.gate_mode == "gate_free" and (self.W_g is not None or self.b_g is not None):
            raise ValueError("gate_free params must not carry gate projections")


@dataclass
class TimeMixState:
    """Per-head matrix-valued attention state, fixed size for the model's life."""

    S: np.ndarray  # [B, H, N, N]

    @classmethod
    def zeros(cls, batch: int, n_heads: int, head_dim: int, dtype) -> "TimeMixState":
        return cls(np.zeros((batch, n_heads, head_dim, head_dim), dtype=dtype))


@dataclass
class TokenSignals:
    """Projected per-token signals, each [B, T, H, N] (kappa_hat/a/g optional)."""

    r: Tensor
    k: Tensor
    v: Tensor
    w: Tensor
    kappa_hat: Optional[Tensor] = None
    a: Optional[Tensor] = None
    g: Optional[Tensor] = None


def _heads(x: Tensor, n_heads: int, head_dim: int) -> Tensor:
    b, t, _ = x.shape
    return reshape(x, (b, t, n_heads, head_dim))


def timemix_project(x: Tensor, x_prev: Optional[Tensor], p: TimeMixParams) -> TokenSignals:
    """Token-shift interpolation feeding all projections.

    x_tilde = mix * x_t + (1 - mix) * x_{t-1}, with x_{-1} = x_prev (or zeros);
    then w = exp(-exp(x W_w)), a = sigma(x W_a) (doubled for extended range),
    kappa_hat = per-head L2-normalized x W_kappa, and plain r/k/v projections.
    """
    mix = p.token_shift_mix
    ones = constant(np.ones_like(mix.data))
    shifted = shift_rows_down(x, x_prev)
    xs = add(mul_row(x, mix), mul_row(shifted, sub(ones, mix)))

    h, n = p.n_heads, p.head_dim
    w = _heads(exp(scale(exp(matmul(xs, p.W_w)), -1.0)), h, n)
    k = _heads(matmul(xs, p.W_k), h, n)
    v = _heads(matmul(xs, p.W_v), h, n)
    r = _heads(matmul(xs, p.W_r), h, n)

    kappa_hat = a = g = None
    if p.kind == "rwkv7":
        kappa_hat = rows_l2_normalize(_heads(matmul(xs, p.W_kappa), h, n), KAPPA_EPS)
        a = sigmoid(matmul(xs, p.W_a))
        if p.a_range == "extended":
            a = scale(a, 2.0)
        a = _heads(a, h, n)
    if p.gate_mode == "gated":
        g = _heads(sigmoid(add_row(matmul(xs, p.W_g), p.b_g)), h, n)
    return TokenSignals(r=r, k=k, v=v, w=w, kappa_hat=kappa_hat, a=a, g=g)


# ---------------------------------------------------------------------------
# single-step updates (plain arrays, vectorized over any leading axes)
# ---------------------------------------------------------------------------

def rwkv7_step(S: np.ndarray, w: np.ndarray, kappa_hat: np.ndarray,
               a: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """S' = S (diag(w) - kappa^T (a*kappa)) + v^T k.  S is [..., Nv, Nk]."""
    ak = a * kappa_hat
    u = (S @ kappa_hat[..., None])[..., 0]            # S kappa^T
    return (S * w[..., None, :]
            - u[..., None] * ak[..., None, :]
            + v[..., None] * k[..., None, :])


def rwkv6_step(S: np.ndarray, w: np.ndarray, k: np.ndarray,
               v: np.ndarray) -> np.ndarray:
    """S' = diag(w) S + k^T v.  S is [..., Nk, Nv] (decay on the key side)."""
    return w[..., None] * S + k[..., None] * v[..., None, :]


def transition_matrix(w: np.ndarray, kappa_hat: np.ndarray,
                      a: np.ndarray) -> np.ndarray:
    """Explicit [N, N] transition diag(w) - kappa^T (a*kappa), for analysis."""
    w = np.asarray(w, dtype=np.float64)
    kappa_hat = np.asarray(kappa_hat, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    return np.diag(w) - np.outer(kappa_hat, a * kappa_hat)


# ---------------------------------------------------------------------------
# whole-sequence scans (autograd primitives)
# ---------------------------------------------------------------------------

def _check_state(S: np.ndarray, t: int) -> None:
    if not np.all(np.isfinite(S)):
        raise RecurrenceError(f"non-finite state at step {t}")


def rwkv7_scan(w: Tensor, kappa_hat: Tensor, a: Tensor, k: Tensor, v: Tensor,
               r: Tensor, S0: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Run the RWKV-7 recurrence over a whole sequence.

    Inputs are [B, T, H, N]; S0 is a plain [B, H, N, N] array (no gradient
    path into the initial state). Returns per-token readouts o [B, T, H, N]
    and the final state. Gradients flow through the readouts into every
    signal via the full unrolled recurrence.
    """
    b, t_len, h, n = w.shape
    if S0.shape != (b, h, n, n):
        raise ValueError(f"state shape {S0.shape} != {(b, h, n, n)}")
    wd, kapd, ad, kd, vd, rd = (x.data for x in (w, kappa_hat, a, k, v, r))

    states = np.empty((t_len + 1, b, h, n, n), dtype=wd.dtype)
    states[0] = S0
    o_data = np.empty_like(wd)
    for t in range(t_len):
        S = rwkv7_step(states[t], wd[:, t], kapd[:, t], ad[:, t], kd[:, t], vd[:, t])
        _check_state(S, t)
        states[t + 1] = S
        o_data[:, t] = (S @ rd[:, t][..., None])[..., 0]

    def bwd(go, needs):
        gw = np.zeros_like(wd)
        gkap = np.zeros_like(kapd)
        ga = np.zeros_like(ad)
        gk = np.zeros_like(kd)
        gv = np.zeros_like(vd)
        gr = np.zeros_like(rd)
        G = np.zeros((b, h, n, n), dtype=wd.dtype)
        for t in range(t_len - 1, -1, -1):
            S_t = states[t + 1]
            S_prev = states[t]
            go_t = go[:, t]
            gr[:, t] = (np.swapaxes(S_t, -1, -2) @ go_t[..., None])[..., 0]
            G = G + go_t[..., None] * rd[:, t][..., None, :]
            gv[:, t] = (G @ kd[:, t][..., None])[..., 0]
            gk[:, t] = (np.swapaxes(G, -1, -2) @ vd[:, t][..., None])[..., 0]
            # dT[j', j] = sum_i S_prev[i, j'] G[i, j]
            dT = np.swapaxes(S_prev, -1, -2) @ G
            gw[:, t] = np.einsum("bhjj->bhj", dT)
            ak = ad[:, t] * kapd[:, t]
            M = -dT
            m_ak = (M @ ak[..., None])[..., 0]
            mt_kap = (np.swapaxes(M, -1, -2) @ kapd[:, t][..., None])[..., 0]
            gkap[:, t] = m_ak + ad[:, t] * mt_kap
            ga[:, t] = kapd[:, t] * mt_kap
            # G_{t-1} = G T_t^T
            g_ak = (G @ ak[..., None])[..., 0]
            G = G * wd[:, t][..., None, :] - g_ak[..., None] * kapd[:, t][..., None, :]
        outs = (gw, gkap, ga, gk, gv, gr)
        return tuple(g if need else None for g, need in zip(outs, needs))

    o = _emit("rwkv7_scan", (w, kappa_hat, a, k, v, r), o_data, bwd)
    return o, states[t_len].copy()


def rwkv6_scan(w: Tensor, k: Tensor, v: Tensor, r: Tensor,
               S0: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """RWKV-6 recurrence over a sequence: S = diag(w) S + k^T v, o = r S."""
    b, t_len, h, n = w.shape
    if S0.shape != (b, h, n, n):
        raise ValueError(f"state shape {S0.shape} != {(b, h, n, n)}")
    wd, kd, vd, rd = (x.data for x in (w, k, v, r))

    states = np.empty((t_len + 1, b, h, n, n), dtype=wd.dtype)
    states[0] = S0
    o_data = np.empty_like(wd)
    for t in range(t_len):
        S = rwkv6_step(states[t], wd[:, t], kd[:, t], vd[:, t])
        _check_state(S, t)
        states[t + 1] = S
        o_data[:, t] = (np.swapaxes(S, -1, -2) @ rd[:, t][..., None])[..., 0]

    def bwd(go, needs):
        gw = np.zeros_like(wd)
        gk = np.zeros_like(kd)
        gv = np.zeros_like(vd)
        gr = np.zeros_like(rd)
        G = np.zeros((b, h, n, n), dtype=wd.dtype)
        for t in range(t_len - 1, -1, -1):
            S_t = states[t + 1]
            S_prev = states[t]
            go_t = go[:, t]
            gr[:, t] = (S_t @ go_t[..., None])[..., 0]
            G = G + rd[:, t][..., None] * go_t[..., None, :]
            gk[:, t] = (G @ vd[:, t][..., None])[..., 0]
            gv[:, t] = (np.swapaxes(G, -1, -2) @ kd[:, t][..., None])[..., 0]
            gw[:, t] = (G * S_prev).sum(axis=-1)
            G = G * wd[:, t][..., None]
        outs = (gw, gk, gv, gr)
        return tuple(g if need else None for g, need in zip(outs, needs))

    o = _emit("rwkv6_scan", (w, k, v, r), o_data, bwd)
    return o, states[t_len].copy()


def timemix_forward(x: Tensor, p: TimeMixParams, S0: Optional[TimeMixState] = None,
                    norm_mode: str = "none",
                    x_prev: Optional[Tensor] = None,
                    ) -> tuple[Tensor, Tensor, TimeMixState]:
    """Full time-mixing sublayer on [B, T, d].

    Returns (y, h_tm, S_T): h_tm is the pre-W_O head concat (gated and
    optionally per-head-normalized), y = h_tm @ W_O.
    """
    if norm_mode not in ("none", "group_norm"):
        raise ValueError(f"unknown norm_mode {norm_mode!r}")
    b, t, d = x.shape
    h, n = p.n_heads, p.head_dim
    sig = timemix_project(x, x_prev, p)
    if S0 is None:
        S0 = TimeMixState.zeros(b, h, n, x.data.dtype)
    if p.kind == "rwkv7":
        o, s_final = rwkv7_scan(sig.w, sig.kappa_hat, sig.a, sig.k, sig.v,
                                sig.r, S0.S)
    else:
        o, s_final = rwkv6_scan(sig.w, sig.k, sig.v, sig.r, S0.S)
    if norm_mode == "group_norm":
        o = normalize_rows(o, GROUP_NORM_EPS)
    if p.gate_mode == "gated":
        o = mul(sig.g, o)
    h_tm = reshape(o, (b, t, h * n))
    y = matmul(h_tm, p.W_O)
    return y, h_tm, TimeMixState(s_final)
