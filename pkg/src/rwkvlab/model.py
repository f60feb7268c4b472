"""Model assembly: toy GQA teacher, RNN-attention student conversion, and the
stage-1 wrapper that hosts both attention paths inside one decoder layer.

Layers follow the pre-norm residual topology

    x <- x + Attn(RMSNorm(x));  x <- x + MLP(RMSNorm(x))

with a final RMSNorm before the (untied) output head.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .layers import GqaParams, MlpParams, NormParams, gqa_attention, rmsnorm, swiglu_mlp
from .tensor import Tensor, add, embed, matmul, reshape, straight_through
from .timemix import GATE_BIAS_INIT, TimeMixParams, timemix_forward

ATTENTION_KINDS = ("gqa", "rwkv7", "rwkv6", "wrapper")
COMBINE_MODES = ("pass_through", "straight_through")

INIT_STD = 0.02
NORM_EPS = 1e-6


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    d_ffn: int
    max_seq_len: int
    seed: int
    rope_theta: float = 10000.0
    attention_kind: str = "gqa"
    gate_mode: str = "gated"
    a_range: str = "unit"
    norm_mode: str = "none"

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads",
                     "n_kv_heads", "head_dim", "d_ffn", "max_seq_len"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.d_model != self.n_heads * self.head_dim:
            raise ValueError(
                f"d_model ({self.d_model}) != n_heads*head_dim "
                f"({self.n_heads}*{self.head_dim})")
        if self.n_heads % self.n_kv_heads != 0:
            raise ValueError(
                f"n_heads ({self.n_heads}) must be divisible by n_kv_heads "
                f"({self.n_kv_heads})")
        if self.max_seq_len < 2:
            raise ValueError(f"max_seq_len must be >= 2, got {self.max_seq_len}")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ValueError(f"attention_kind must be one of {ATTENTION_KINDS}, "
                             f"got {self.attention_kind!r}")
        if self.attention_kind in ("gqa", "wrapper") and self.head_dim % 2 != 0:
            raise ValueError(f"head_dim must be even for RoPE, got {self.head_dim}")
        if self.gate_mode not in ("gated", "gate_free"):
            raise ValueError(f"gate_mode must be gated|gate_free, got {self.gate_mode!r}")
        if self.a_range not in ("unit", "extended"):
            raise ValueError(f"a_range must be unit|extended, got {self.a_range!r}")
        if self.norm_mode not in ("none", "group_norm"):
            raise ValueError(f"norm_mode must be none|group_norm, got {self.norm_mode!r}")


@dataclass
class WrapperPair:
    """Frozen teacher attention plus a trainable time mixer in one slot."""

    teacher_attn: GqaParams
    student_tm: TimeMixParams
    combine_mode: str = "pass_through"

    def __post_init__(self):
        if self.combine_mode not in COMBINE_MODES:
            raise ValueError(f"combine_mode must be one of {COMBINE_MODES}, "
                             f"got {self.combine_mode!r}")


AttnParams = Union[GqaParams, TimeMixParams, WrapperPair]


@dataclass
class DecoderLayer:
    attn: AttnParams
    mlp: MlpParams
    norm1: NormParams
    norm2: NormParams


@dataclass
class DecoderModel:
    config: ModelConfig
    embed: Tensor                 # [V, d]
    layers: list[DecoderLayer]
    final_norm: NormParams
    head: Tensor                  # [d, V], untied

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {"embed": self.embed}
        for i, layer in enumerate(self.layers):
            pre = f"layers.{i}"
            out[f"{pre}.norm1.gamma"] = layer.norm1.gamma
            for name, t in _attn_params(layer.attn):
                out[f"{pre}.attn.{name}"] = t
            out[f"{pre}.norm2.gamma"] = layer.norm2.gamma
            out[f"{pre}.mlp.W_gate"] = layer.mlp.W_gate
            out[f"{pre}.mlp.W_up"] = layer.mlp.W_up
            out[f"{pre}.mlp.W_down"] = layer.mlp.W_down
        out["final_norm.gamma"] = self.final_norm.gamma
        out["head"] = self.head
        return out


_GQA_FIELDS = ("W_Q", "W_K", "W_V", "b_Q", "b_K", "b_V", "W_O")
_TM_FIELDS = ("W_r", "W_k", "W_v", "W_w", "W_kappa", "W_a", "W_g", "b_g",
              "W_O", "token_shift_mix")


def _attn_params(attn: AttnParams) -> list[tuple[str, Tensor]]:
    if isinstance(attn, GqaParams):
        return [(f, getattr(attn, f)) for f in _GQA_FIELDS]
    if isinstance(attn, TimeMixParams):
        return [(f, getattr(attn, f)) for f in _TM_FIELDS
                if getattr(attn, f) is not None]
    if isinstance(attn, WrapperPair):
        out = [(f"teacher.{n}", t) for n, t in _attn_params(attn.teacher_attn)]
        out += [(f"student.{n}", t) for n, t in _attn_params(attn.student_tm)]
        return out
    raise TypeError(f"unknown attention params {type(attn)!r}")


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _init_gqa(rng, cfg: ModelConfig) -> GqaParams:
    d, hn = cfg.d_model, cfg.n_heads * cfg.head_dim
    kn = cfg.n_kv_heads * cfg.head_dim
    return GqaParams(
        W_Q=Tensor(rng.normal(0, INIT_STD, (d, hn))),
        W_K=Tensor(rng.normal(0, INIT_STD, (d, kn))),
        W_V=Tensor(rng.normal(0, INIT_STD, (d, kn))),
        b_Q=Tensor(np.zeros(hn)),
        b_K=Tensor(np.zeros(kn)),
        b_V=Tensor(np.zeros(kn)),
        W_O=Tensor(rng.normal(0, INIT_STD, (hn, d))),
        n_heads=cfg.n_heads,
        n_kv_heads=cfg.n_kv_heads,
        head_dim=cfg.head_dim,
    )


def _init_timemix(rng, cfg: ModelConfig, kind: str) -> TimeMixParams:
    d, hn = cfg.d_model, cfg.n_heads * cfg.head_dim
    gated = cfg.gate_mode == "gated"
    return TimeMixParams(
        W_r=Tensor(rng.normal(0, INIT_STD, (d, hn))),
        W_k=Tensor(rng.normal(0, INIT_STD, (d, hn))),
        W_v=Tensor(rng.normal(0, INIT_STD, (d, hn))),
        W_w=Tensor(rng.normal(0, INIT_STD, (d, hn))),
        W_O=Tensor(rng.normal(0, INIT_STD, (hn, d))),
        token_shift_mix=Tensor(np.full(d, 0.5)),
        n_heads=cfg.n_heads,
        head_dim=cfg.head_dim,
        kind=kind,
        gate_mode=cfg.gate_mode,
        a_range=cfg.a_range,
        W_kappa=Tensor(rng.normal(0, INIT_STD, (d, hn))) if kind == "rwkv7" else None,
        W_a=Tensor(rng.normal(0, INIT_STD, (d, hn))) if kind == "rwkv7" else None,
        W_g=Tensor(np.zeros((d, hn))) if gated else None,
        b_g=Tensor(np.full(hn, GATE_BIAS_INIT)) if gated else None,
    )


def _init_mlp(rng, cfg: ModelConfig) -> MlpParams:
    return MlpParams(
        W_gate=Tensor(rng.normal(0, INIT_STD, (cfg.d_model, cfg.d_ffn))),
        W_up=Tensor(rng.normal(0, INIT_STD, (cfg.d_model, cfg.d_ffn))),
        W_down=Tensor(rng.normal(0, INIT_STD, (cfg.d_ffn, cfg.d_model))),
    )


def _norm(cfg: ModelConfig) -> NormParams:
    return NormParams(gamma=Tensor(np.ones(cfg.d_model)), eps=NORM_EPS)


def build_teacher(cfg: ModelConfig) -> DecoderModel:
    """Deterministic GQA transformer from the config seed (scaled-normal
    projections, unit norm gains, zero biases, untied output head)."""
    if cfg.attention_kind != "gqa":
        raise ValueError(f"teacher must use gqa attention, got {cfg.attention_kind!r}")
    rng = np.random.default_rng(cfg.seed)
    embed_w = Tensor(rng.normal(0, INIT_STD, (cfg.vocab_size, cfg.d_model)))
    layers = []
    for _ in range(cfg.n_layers):
        layers.append(DecoderLayer(
            attn=_init_gqa(rng, cfg),
            mlp=_init_mlp(rng, cfg),
            norm1=_norm(cfg),
            norm2=_norm(cfg),
        ))
    head = Tensor(rng.normal(0, INIT_STD, (cfg.d_model, cfg.vocab_size)))
    return DecoderModel(cfg, embed_w, layers, _norm(cfg), head)


def build_student(cfg: ModelConfig) -> DecoderModel:
    """Fresh RNN-attention model (no teacher), for probes trained from scratch."""
    if cfg.attention_kind not in ("rwkv7", "rwkv6"):
        raise ValueError(f"student must be rwkv7|rwkv6, got {cfg.attention_kind!r}")
    rng = np.random.default_rng(cfg.seed)
    embed_w = Tensor(rng.normal(0, INIT_STD, (cfg.vocab_size, cfg.d_model)))
    layers = []
    for _ in range(cfg.n_layers):
        layers.append(DecoderLayer(
            attn=_init_timemix(rng, cfg, cfg.attention_kind),
            mlp=_init_mlp(rng, cfg),
            norm1=_norm(cfg),
            norm2=_norm(cfg),
        ))
    head = Tensor(rng.normal(0, INIT_STD, (cfg.d_model, cfg.vocab_size)))
    return DecoderModel(cfg, embed_w, layers, _norm(cfg), head)


def build_model(cfg: ModelConfig) -> DecoderModel:
    """Construct any attention_kind from a config (loader entry point);
    parameter values are the seeded initialization until overwritten."""
    if cfg.attention_kind == "gqa":
        return build_teacher(cfg)
    if cfg.attention_kind in ("rwkv7", "rwkv6"):
        return build_student(cfg)
    teacher = build_teacher(dataclasses.replace(cfg, attention_kind="gqa"))
    return wrap_for_alignment(teacher, gate_mode=cfg.gate_mode,
                              a_range=cfg.a_range, norm_mode=cfg.norm_mode)


def _copy_tensor(t: Tensor) -> Tensor:
    return Tensor(t.data.copy())


def _copy_mlp(p: MlpParams) -> MlpParams:
    return MlpParams(_copy_tensor(p.W_gate), _copy_tensor(p.W_up), _copy_tensor(p.W_down))


def _copy_norm(p: NormParams) -> NormParams:
    return NormParams(_copy_tensor(p.gamma), p.eps)


def _expand_kv(w: np.ndarray, n_kv: int, group: int) -> np.ndarray:
    """[d, Hkv*N] -> [d, H*N]: query head i receives kv head i // group."""
    d = w.shape[0]
    return np.repeat(w.reshape(d, n_kv, -1), group, axis=1).reshape(d, -1)


def convert_to_student(teacher: DecoderModel, kind: str,
                       init_mode: str = "fresh",
                       gate_mode: Optional[str] = None,
                       a_range: Optional[str] = None,
                       norm_mode: Optional[str] = None) -> DecoderModel:
    """Replace every attention block with a time mixer; copy everything else
    bit-exactly. `fresh` draws new time-mix weights from the seed;
    `from_teacher` maps W_r<-W_Q, W_k/W_v<-group-expanded W_K/W_V, W_O<-W_O."""
    if teacher.config.attention_kind != "gqa":
        raise ValueError("conversion expects a gqa teacher")
    if kind not in ("rwkv7", "rwkv6"):
        raise ValueError(f"student kind must be rwkv7|rwkv6, got {kind!r}")
    if init_mode not in ("fresh", "from_teacher"):
        raise ValueError(f"init_mode must be fresh|from_teacher, got {init_mode!r}")
    cfg = dataclasses.replace(
        teacher.config,
        attention_kind=kind,
        gate_mode=gate_mode if gate_mode is not None else teacher.config.gate_mode,
        a_range=a_range if a_range is not None else teacher.config.a_range,
        norm_mode=norm_mode if norm_mode is not None else teacher.config.norm_mode,
    )
    layers = []
    for i, src in enumerate(teacher.layers):
        rng = np.random.default_rng([cfg.seed, 1000 + i])
        tm = _init_timemix(rng, cfg, kind)
        if init_mode == "from_teacher":
            g = src.attn.group_size
            tm.W_r = Tensor(src.attn.W_Q.data.copy())
            tm.W_k = Tensor(_expand_kv(src.attn.W_K.data, cfg.n_kv_heads, g))
            tm.W_v = Tensor(_expand_kv(src.attn.W_V.data, cfg.n_kv_heads, g))
            tm.W_O = Tensor(src.attn.W_O.data.copy())
        layers.append(DecoderLayer(
            attn=tm,
            mlp=_copy_mlp(src.mlp),
            norm1=_copy_norm(src.norm1),
            norm2=_copy_norm(src.norm2),
        ))
    return DecoderModel(cfg, _copy_tensor(teacher.embed), layers,
                        _copy_norm(teacher.final_norm), _copy_tensor(teacher.head))


def wrap_for_alignment(teacher: DecoderModel, combine_mode: str = "pass_through",
                       gate_mode: Optional[str] = None,
                       a_range: Optional[str] = None,
                       norm_mode: Optional[str] = None) -> DecoderModel:
    """Put a WrapperPair in every layer: the original attention (frozen) plus
    a fresh time mixer trained to reproduce its output."""
    if teacher.config.attention_kind == "wrapper":
        raise ValueError("model is already wrapped")
    if teacher.config.attention_kind != "gqa":
        raise ValueError("alignment wrapping expects a gqa teacher")
    cfg = dataclasses.replace(
        teacher.config,
        attention_kind="wrapper",
        gate_mode=gate_mode if gate_mode is not None else teacher.config.gate_mode,
        a_range=a_range if a_range is not None else teacher.config.a_range,
        norm_mode=norm_mode if norm_mode is not None else teacher.config.norm_mode,
    )
    layers = []
    for i, src in enumerate(teacher.layers):
        rng = np.random.default_rng([cfg.seed, 1000 + i])
        teacher_attn = dataclasses.replace(
            src.attn,
            **{f: Tensor(getattr(src.attn, f).data.copy()) for f in _GQA_FIELDS})
        for f in _GQA_FIELDS:
            getattr(teacher_attn, f).requires_grad = False
        layers.append(DecoderLayer(
            attn=WrapperPair(teacher_attn=teacher_attn,
                             student_tm=_init_timemix(rng, cfg, "rwkv7"),
                             combine_mode=combine_mode),
            mlp=_copy_mlp(src.mlp),
            norm1=_copy_norm(src.norm1),
            norm2=_copy_norm(src.norm2),
        ))
    return DecoderModel(cfg, _copy_tensor(teacher.embed), layers,
                        _copy_norm(teacher.final_norm), _copy_tensor(teacher.head))


def extract_student(wrapped: DecoderModel, kind: str = "rwkv7") -> DecoderModel:
    """Turn an alignment-wrapped model into a pure RNN student, keeping the
    trained time mixers and the shared (frozen) trunk."""
    if wrapped.config.attention_kind != "wrapper":
        raise ValueError("extract_student expects a wrapped model")
    cfg = dataclasses.replace(wrapped.config, attention_kind=kind)
    layers = []
    for src in wrapped.layers:
        tm = src.attn.student_tm
        copied = dataclasses.replace(
            tm,
            **{f: (Tensor(getattr(tm, f).data.copy())
                   if getattr(tm, f) is not None else None)
               for f in _TM_FIELDS})
        layers.append(DecoderLayer(
            attn=copied,
            mlp=_copy_mlp(src.mlp),
            norm1=_copy_norm(src.norm1),
            norm2=_copy_norm(src.norm2),
        ))
    return DecoderModel(cfg, _copy_tensor(wrapped.embed), layers,
                        _copy_norm(wrapped.final_norm), _copy_tensor(wrapped.head))


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _attn_forward(x: Tensor, layer: DecoderLayer, cfg: ModelConfig,
                  collect: Optional[list]) -> Tensor:
    attn = layer.attn
    if isinstance(attn, GqaParams):
        y, _ = gqa_attention(x, attn, cfg.rope_theta)
        return y
    if isinstance(attn, TimeMixParams):
        y, _, _ = timemix_forward(x, attn, norm_mode=cfg.norm_mode)
        return y
    # WrapperPair: run both paths; output follows the teacher exactly.
    y_teacher, _ = gqa_attention(x, attn.teacher_attn, cfg.rope_theta)
    y_student, _, _ = timemix_forward(x, attn.student_tm, norm_mode=cfg.norm_mode)
    if collect is not None:
        collect.append((y_teacher, y_student))
    if attn.combine_mode == "pass_through":
        return y_teacher
    return straight_through(y_student, y_teacher)


def forward_lm(model: DecoderModel, tokens: np.ndarray,
               collect: Optional[list] = None) -> Tensor:
    """Next-token logits for int token ids [B, T] (or [T] for one sequence).

    Wrapper layers append their (teacher, student) attention outputs to
    `collect` when given. RNN students accept any length; attention-bound
    models reject T > max_seq_len.
    """
    tokens = np.asarray(tokens)
    squeeze = tokens.ndim == 1
    if squeeze:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be [B, T] or [T], got shape {tokens.shape}")
    cfg = model.config
    t = tokens.shape[1]
    if cfg.attention_kind in ("gqa", "wrapper") and t > cfg.max_seq_len:
        raise ValueError(
            f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    x = embed(model.embed, tokens)
    for layer in model.layers:
        x = add(x, _attn_forward(rmsnorm(x, layer.norm1), layer, cfg, collect))
        x = add(x, swiglu_mlp(rmsnorm(x, layer.norm2), layer.mlp))
    logits = matmul(rmsnorm(x, model.final_norm), model.head)
    if squeeze:
        logits = reshape(logits, logits.shape[1:])
    return logits


# ---------------------------------------------------------------------------
# freezing
# ---------------------------------------------------------------------------

def full_mask(model: DecoderModel, trainable: bool = True) -> dict[str, bool]:
    return {name: trainable for name in model.named_parameters()}


def apply_freeze(model: DecoderModel, mask: dict[str, bool]) -> DecoderModel:
    """Set per-parameter trainability. The mask must cover every parameter
    exactly; frozen tensors stop recording gradients entirely."""
    params = model.named_parameters()
    missing = sorted(set(params) - set(mask))
    extra = sorted(set(mask) - set(params))
    if missing or extra:
        raise ValueError(
            f"freeze mask mismatch: missing={missing[:4]} extra={extra[:4]}")
    for name, t in params.items():
        t.requires_grad = bool(mask[name])
    return model


def trainable_parameters(model: DecoderModel) -> dict[str, Tensor]:
    return {n: t for n, t in model.named_parameters().items() if t.requires_grad}


def model_hash(model: DecoderModel) -> str:
    """Content hash of all parameters (f32 bytes, name order)."""
    h = hashlib.sha256()
    for name, t in model.named_parameters().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data, dtype=np.float32).tobytes())
    return h.hexdigest()


def parameters_equal(a: DecoderModel, b: DecoderModel, names=None) -> bool:
    pa, pb = a.named_parameters(), b.named_parameters()
    names = names if names is not None else pa.keys()
    return all(pa[n].data.tobytes() == pb[n].data.tobytes() for n in names)
