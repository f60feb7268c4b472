"""Three-stage conversion recipe plus the optimizer.

Stage 1 (align):   train each layer's time mixer to reproduce the frozen
                   teacher attention output (per-token L2 loss, width-scaled).
Stage 2 (distill): word-level KL from a frozen teacher's next-token
                   distribution into the full student, with the gate/MLP
                   ablation axes.
Stage 3 (sft):     plain next-token cross-entropy at a longer context.

Determinism contract: the batch for step k is a pure function of (seed, k),
so fixed seeds give bit-identical loss sequences and checkpoint-resume
continues exactly where an uninterrupted run would be.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .model import (
    DecoderModel,
    apply_freeze,
    forward_lm,
    model_hash,
    trainable_parameters,
)
from .tensor import (
    Graph,
    Tensor,
    backward,
    constant,
    cross_entropy,
    log_softmax_rows,
    mean_all,
    mul,
    rows_l2_norm,
    scale,
    sub,
    sum_all,
)

STAGES = ("pretrain", "align", "distill", "sft")

# Table-style ablation tags: (freeze_mlp, gate_mode, larger teacher).
VARIANT_TAGS = {
    (True, "gate_free", False): "ARWKV",
    (False, "gate_free", False): "active-MLP",
    (False, "gated", False): "gate+active-MLP",
    (True, "gate_free", True): "from-larger",
}


@dataclass
class TrainConfig:
    stage: str
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 8
    seq_len: int = 64
    max_steps: int = 200
    log_every: int = 10
    seed: int = 0
    freeze_mlp: bool = True
    gate_mode: str = "gated"
    combine_mode: str = "pass_through"
    kl_direction: str = "forward"
    variant: str = ""
    prev_stage_seq_len: Optional[int] = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        for name in ("batch_size", "seq_len", "max_steps", "log_every"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.kl_direction != "forward":
            raise ValueError("kl_direction is fixed to forward (teacher||student)")
        if self.stage == "sft" and self.prev_stage_seq_len is not None \
                and self.seq_len <= self.prev_stage_seq_len:
            raise ValueError(
                f"sft seq_len ({self.seq_len}) must exceed the previous stage's "
                f"({self.prev_stage_seq_len})")


@dataclass
class TrainRun:
    """Mutable training state: the unit of reproducibility."""

    stage: str
    variant: str = ""
    seed: int = 0
    step: int = 0
    tokens_seen: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    loss_curve: list[tuple[int, float]] = field(default_factory=list)
    wall_ms_total: float = 0.0


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def alignment_loss(h_teacher: Tensor, h_student: Tensor, d_model: int) -> Tensor:
    """Per token ||h_teacher - h_student||_2 * d_model^-0.5, mean over tokens."""
    if h_teacher.shape != h_student.shape:
        raise ValueError(
            f"alignment shapes differ: {h_teacher.shape} vs {h_student.shape}")
    diff = sub(h_teacher, h_student)
    per_token = rows_l2_norm(diff)             # [B, T]
    return mean_all(scale(per_token, d_model ** -0.5))


def kd_loss_wordlevel(logits_teacher: Tensor, logits_student: Tensor) -> Tensor:
    """Mean over positions of KL(softmax(teacher) || softmax(student)).

    The teacher distribution is detached: gradients only reach the student.
    """
    if logits_teacher.shape != logits_student.shape:
        raise ValueError(
            f"kd logits shapes differ: {logits_teacher.shape} vs {logits_student.shape}")
    z = logits_teacher.data - logits_teacher.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(logp)
    logq = log_softmax_rows(logits_student)
    per_elem = mul(constant(p), sub(constant(logp), logq))
    n_positions = int(np.prod(logits_teacher.shape[:-1]))
    return scale(sum_all(per_elem), 1.0 / n_positions)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adam_step(params: dict[str, Tensor], run: TrainRun, cfg: TrainConfig) -> None:
    """Adam with bias correction and decoupled weight decay; `run.step` must
    already be advanced to the 1-based step number."""
    t = run.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise RuntimeError(f"non-finite gradient for parameter {name!r}")
        m = run.m.setdefault(name, np.zeros_like(p.data))
        v = run.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.weight_decay > 0.0:
            update = update + cfg.weight_decay * p.data
        p.data -= (cfg.lr * update).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def sample_batch(corpus: np.ndarray, batch_size: int, seq_len: int,
                 seed: int, step: int) -> np.ndarray:
    """[B, seq_len+1] windows (inputs plus one lookahead token), derived purely
    from (seed, step) so data order never depends on loader timing."""
    span = seq_len + 1
    if len(corpus) < span:
        raise ValueError(f"corpus of {len(corpus)} tokens shorter than {span}")
    rng = np.random.default_rng([seed, step])
    starts = rng.integers(0, len(corpus) - span + 1, size=batch_size)
    return np.stack([corpus[s:s + span] for s in starts])


class MetricsSink:
    """Anything with .write(record: dict); None disables emission."""

    def write(self, record: dict) -> None:  # pragma: no cover - interface only
        raise NotImplementedError


def train_loop(cfg: TrainConfig, run: TrainRun,
                loss_fn: Callable[[int], Tensor],
                params: dict[str, Tensor],
                metrics: Optional[MetricsSink]) -> TrainRun:
    while run.step < cfg.max_steps:
        step = run.step
        t0 = time.perf_counter()
        for p in params.values():
            p.grad = None
        with Graph() as g:
            loss = loss_fn(step)
        backward(loss, g)
        run.step = step + 1
        adam_step(params, run, cfg)
        wall = (time.perf_counter() - t0) * 1000.0
        run.wall_ms_total += wall
        run.tokens_seen += cfg.batch_size * cfg.seq_len
        run.loss_curve.append((run.step, loss.item()))
        if metrics is not None and run.step % cfg.log_every == 0:
            metrics.write({
                "step": run.step,
                "loss": loss.item(),
                "tokens_seen": run.tokens_seen,
                "wall_ms": round(wall, 3),
                "stage": cfg.stage,
                "variant": run.variant,
            })
    return run


def _new_run(cfg: TrainConfig, variant: str = "") -> TrainRun:
    return TrainRun(stage=cfg.stage, variant=variant or cfg.variant, seed=cfg.seed)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage1_align(wrapped: DecoderModel, corpus: np.ndarray, cfg: TrainConfig,
                 run: Optional[TrainRun] = None,
                 metrics: Optional[MetricsSink] = None) -> TrainRun:
    """Train only the time mixers inside an alignment-wrapped model.

    Loss is the mean over layers of the width-scaled alignment loss between
    each layer's teacher attention output and its mixer's output. Aborts if
    any frozen parameter drifts.
    """
    if cfg.stage != "align":
        raise ValueError(f"stage1_align needs stage='align', got {cfg.stage!r}")
    if wrapped.config.attention_kind != "wrapper":
        raise ValueError("stage1_align expects a wrapped model")
    all_params = wrapped.named_parameters()
    mask = {n: ".attn.student." in n for n in all_params}
    apply_freeze(wrapped, mask)
    frozen_names = [n for n, keep in mask.items() if not keep]
    before = {n: all_params[n].data.copy() for n in frozen_names}

    d_model = wrapped.config.d_model
    n_layers = wrapped.config.n_layers
    params = trainable_parameters(wrapped)
    run = run or _new_run(cfg, variant="stage1")

    def loss_fn(step: int) -> Tensor:
        batch = sample_batch(corpus, cfg.batch_size, cfg.seq_len, cfg.seed, step)
        pairs: list = []
        forward_lm(wrapped, batch[:, :-1], collect=pairs)
        total = None
        for y_teacher, y_student in pairs:
            term = alignment_loss(y_teacher, y_student, d_model)
            total = term if total is None else total + term
        return scale(total, 1.0 / n_layers)

    train_loop(cfg, run, loss_fn, params, metrics)

    after = wrapped.named_parameters()
    for n in frozen_names:
        if after[n].data.tobytes() != before[n].tobytes():
            raise RuntimeError(f"frozen parameter {n!r} drifted during alignment")
    return run


def mean_alignment_loss(wrapped: DecoderModel, tokens: np.ndarray) -> float:
    """Evaluation-only stage-1 loss on one batch (no recording)."""
    pairs: list = []
    forward_lm(wrapped, tokens, collect=pairs)
    d = wrapped.config.d_model
    vals = [alignment_loss(y_t, y_s, d).item() for y_t, y_s in pairs]
    return float(np.mean(vals))


def stage2_distill(teacher: DecoderModel, student: DecoderModel,
                   corpus: np.ndarray, cfg: TrainConfig,
                   run: Optional[TrainRun] = None,
                   metrics: Optional[MetricsSink] = None,
                   larger_teacher: bool = False) -> TrainRun:
    """Word-level KL distillation from a fully frozen teacher.

    The teacher may be a larger-config model; only the vocabulary must match.
    `cfg.freeze_mlp` and the student's gate mode select the ablation variant.
    """
    if cfg.stage != "distill":
        raise ValueError(f"stage2_distill needs stage='distill', got {cfg.stage!r}")
    if teacher.config.vocab_size != student.config.vocab_size:
        raise ValueError(
            f"vocab mismatch: teacher {teacher.config.vocab_size} vs "
            f"student {student.config.vocab_size}")
    gate_mode = student.layers[0].attn.gate_mode
    variant = cfg.variant or VARIANT_TAGS.get(
        (cfg.freeze_mlp, gate_mode, larger_teacher),
        f"freeze_mlp={cfg.freeze_mlp},gate={gate_mode},larger={larger_teacher}")

    teacher_hash = model_hash(teacher)
    mask = {n: not (cfg.freeze_mlp and ".mlp." in n)
            for n in student.named_parameters()}
    apply_freeze(student, mask)
    params = trainable_parameters(student)
    run = run or _new_run(cfg, variant=variant)

    def loss_fn(step: int) -> Tensor:
        batch = sample_batch(corpus, cfg.batch_size, cfg.seq_len, cfg.seed, step)
        inputs = batch[:, :-1]
        logits_t = forward_lm(teacher, inputs)  # outside any graph: untracked
        logits_s = forward_lm(student, inputs)
        return kd_loss_wordlevel(logits_t, logits_s)

    train_loop(cfg, run, loss_fn, params, metrics)

    if model_hash(teacher) != teacher_hash:
        raise RuntimeError("teacher parameters changed during distillation")
    return run


def heldout_kl(teacher: DecoderModel, student: DecoderModel,
               corpus: np.ndarray, cfg: TrainConfig, n_batches: int = 4,
               seed_offset: int = 999_983) -> float:
    """Mean word-level KL on held-out, seed-fixed batches (no training)."""
    vals = []
    for i in range(n_batches):
        batch = sample_batch(corpus, cfg.batch_size, cfg.seq_len,
                             cfg.seed + seed_offset, i)
        inputs = batch[:, :-1]
        logits_t = forward_lm(teacher, inputs)
        logits_s = forward_lm(student, inputs)
        vals.append(kd_loss_wordlevel(logits_t, logits_s).item())
    return float(np.mean(vals))


def train_lm(model: DecoderModel, corpus: np.ndarray, cfg: TrainConfig,
             run: Optional[TrainRun] = None,
             metrics: Optional[MetricsSink] = None,
             freeze_mask: Optional[dict[str, bool]] = None) -> TrainRun:
    """Next-token cross-entropy training (teacher pretraining and stage-3 SFT)."""
    if cfg.stage not in ("pretrain", "sft"):
        raise ValueError(f"train_lm needs stage pretrain|sft, got {cfg.stage!r}")
    mask = freeze_mask or {n: True for n in model.named_parameters()}
    apply_freeze(model, mask)
    params = trainable_parameters(model)
    run = run or _new_run(cfg, variant=cfg.stage)

    def loss_fn(step: int) -> Tensor:
        batch = sample_batch(corpus, cfg.batch_size, cfg.seq_len, cfg.seed, step)
        logits = forward_lm(model, batch[:, :-1])
        return cross_entropy(logits, batch[:, 1:])

    return train_loop(cfg, run, loss_fn, params, metrics)


def stage3_sft(student: DecoderModel, corpus: np.ndarray, cfg: TrainConfig,
               run: Optional[TrainRun] = None,
               metrics: Optional[MetricsSink] = None) -> TrainRun:
    """Context-length extension: plain SFT at a strictly longer seq_len."""
    if cfg.stage != "sft":
        raise ValueError(f"stage3_sft needs stage='sft', got {cfg.stage!r}")
    if cfg.prev_stage_seq_len is None:
        raise ValueError("stage3_sft needs prev_stage_seq_len for the length check")
    return train_lm(student, corpus, cfg, run=run, metrics=metrics)
