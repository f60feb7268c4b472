"""Synthetic corpora and evaluations: Markov char LM, passkey retrieval,
parity and S3 word problems (the state-tracking probes), plus the ablation
report generator.

Every generator is a pure function of its seed: regenerating with the same
TaskSpec yields byte-identical data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import DecoderModel, forward_lm, model_hash
from .tensor import Tensor, cross_entropy
from .training import TrainConfig, TrainRun, kd_loss_wordlevel, train_loop

TASK_KINDS = ("char_lm", "passkey", "parity", "group_comp")

# char_lm: order-3 Markov source over a compact alphabet
CHAR_ALPHABET = 16
CHAR_ORDER = 3
_CHAR_WEIGHTS = np.array([0.6, 0.2, 0.12, 0.08])

# passkey token layout
DIGITS = np.arange(10)          # answer alphabet
KEY_MARK = 10
QUERY_MARK = 11
FILLER_BASE = 12
N_FILLER = 32
PASSKEY_VOCAB = FILLER_BASE + N_FILLER

# parity tokens: inputs and targets both in {0, 1}
PARITY_VOCAB = 2

# S3: inputs {0: transposition, 1: three-cycle}; targets = 6 group elements
S3_GENERATORS = {0: (1, 0, 2), 1: (1, 2, 0)}
S3_ELEMENTS = tuple(sorted({(0, 1, 2), (0, 2, 1), (1, 0, 2),
                            (1, 2, 0), (2, 0, 1), (2, 1, 0)}))
S3_TARGET_BASE = 2              # target token = 2 + element index
S3_VOCAB = 2 + len(S3_ELEMENTS)


@dataclass
class TaskSpec:
    kind: str
    seed: int
    seq_len_train: int = 32
    seq_len_eval: tuple[int, ...] = ()
    n_train: int = 2000
    n_eval: int = 200
    passkey_len: int = 4

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        self.seq_len_eval = tuple(self.seq_len_eval) or (self.seq_len_train,)
        if self.kind == "passkey":
            if self.passkey_len + 2 >= self.seq_len_train:
                raise ValueError("passkey length must be shorter than the context")

    @property
    def vocab_size(self) -> int:
        return {"char_lm": 256, "passkey": PASSKEY_VOCAB,
                "parity": PARITY_VOCAB, "group_comp": S3_VOCAB}[self.kind]

    @property
    def answer_ids(self) -> np.ndarray:
        """Token ids the model chooses between when scored on this task."""
        if self.kind == "passkey":
            return DIGITS.copy()
        if self.kind == "parity":
            return np.array([0, 1])
        if self.kind == "group_comp":
            return S3_TARGET_BASE + np.arange(len(S3_ELEMENTS))
        raise ValueError(f"{self.kind} has no answer alphabet")


# ---------------------------------------------------------------------------
# char corpus (order-3 weighted Markov source)
# ---------------------------------------------------------------------------

def _char_table(seed: int) -> np.ndarray:
    """[A^3, 4] successor ids per context; column 0 is the modal successor."""
    rng = np.random.default_rng([seed, 17])
    n_ctx = CHAR_ALPHABET ** CHAR_ORDER
    table = np.empty((n_ctx, len(_CHAR_WEIGHTS)), dtype=np.int64)
    for c in range(n_ctx):
        table[c] = rng.choice(CHAR_ALPHABET, size=len(_CHAR_WEIGHTS), replace=False)
    return table


def _char_stream(table: np.ndarray, length: int, rng) -> np.ndarray:
    out = np.empty(length, dtype=np.int64)
    out[:CHAR_ORDER] = rng.integers(0, CHAR_ALPHABET, size=CHAR_ORDER)
    choices = rng.choice(len(_CHAR_WEIGHTS), size=length, p=_CHAR_WEIGHTS)
    a = CHAR_ALPHABET
    for t in range(CHAR_ORDER, length):
        ctx = (out[t - 3] * a + out[t - 2]) * a + out[t - 1]
        out[t] = table[ctx, choices[t]]
    return out


def gen_char_corpus(spec: TaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic synthetic text with learnable order-3 structure.

    Returns (train, heldout): two disjoint segments of one stream, so the
    held-out split shares the source but never a token position.
    """
    if spec.kind != "char_lm":
        raise ValueError(f"expected char_lm spec, got {spec.kind!r}")
    table = _char_table(spec.seed)
    rng = np.random.default_rng([spec.seed, 29])
    total = spec.n_train + spec.n_eval
    stream = _char_stream(table, total, rng)
    return stream[:spec.n_train].copy(), stream[spec.n_train:].copy()


def char_source_modes(seed: int) -> np.ndarray:
    """Modal successor per context (for the count-model recovery oracle)."""
    return _char_table(seed)[:, 0].copy()


# ---------------------------------------------------------------------------
# passkey retrieval
# ---------------------------------------------------------------------------

def passkey_sample(rng, context_len: int, key_len: int):
    """One sample: (context tokens, query position, answer tokens).

    Context = filler with [KEY d1..dk] embedded at a random offset and a
    trailing QUERY mark; the answer is the digit string.
    """
    if key_len + 2 > context_len:
        raise ValueError("passkey length must be shorter than the context")
    answer = rng.integers(0, 10, size=key_len)
    context = FILLER_BASE + rng.integers(0, N_FILLER, size=context_len)
    context[-1] = QUERY_MARK
    start = int(rng.integers(0, context_len - key_len - 1))  # fits before QUERY
    context[start] = KEY_MARK
    context[start + 1:start + 1 + key_len] = answer
    return context, context_len - 1, answer


def gen_passkey(spec: TaskSpec):
    """Single sample drawn from the spec seed (see passkey_dataset for sets)."""
    if spec.kind != "passkey":
        raise ValueError(f"expected passkey spec, got {spec.kind!r}")
    rng = np.random.default_rng([spec.seed, 31])
    return passkey_sample(rng, spec.seq_len_train, spec.passkey_len)


def passkey_dataset(spec: TaskSpec, context_len: int, n: int, tag: int = 0):
    """(sequences [n, context+key], answer_starts [n]) for teacher-forced
    training/eval; each row is context followed by its answer digits."""
    rng = np.random.default_rng([spec.seed, 37, tag, context_len])
    rows = np.empty((n, context_len + spec.passkey_len), dtype=np.int64)
    starts = np.empty(n, dtype=np.int64)
    for i in range(n):
        ctx, qpos, ans = passkey_sample(rng, context_len, spec.passkey_len)
        rows[i, :context_len] = ctx
        rows[i, context_len:] = ans
        starts[i] = qpos
    return rows, starts


# ---------------------------------------------------------------------------
# state-tracking probes
# ---------------------------------------------------------------------------

def parity_targets(bits: np.ndarray) -> np.ndarray:
    """Running parity per position (cumulative XOR along the last axis)."""
    bits = np.asarray(bits)
    return np.bitwise_xor.accumulate(bits.astype(np.int64), axis=-1) & 1


def gen_parity(spec: TaskSpec):
    """Labeled bit sequences: train set plus one eval set per eval length."""
    if spec.kind != "parity":
        raise ValueError(f"expected parity spec, got {spec.kind!r}")
    rng = np.random.default_rng([spec.seed, 41])
    train_x = rng.integers(0, 2, size=(spec.n_train, spec.seq_len_train))
    data = {"train": (train_x, parity_targets(train_x)), "eval": {}}
    for length in spec.seq_len_eval:
        ev = np.random.default_rng([spec.seed, 43, length]).integers(
            0, 2, size=(spec.n_eval, length))
        data["eval"][length] = (ev, parity_targets(ev))
    return data


def _s3_compose(p, q):
    """Apply p, then q."""
    return tuple(q[p[i]] for i in range(3))


def s3_targets(gens: np.ndarray) -> np.ndarray:
    """Running-product class ids (token space) for generator sequences."""
    gens = np.asarray(gens)
    flat = gens.reshape(-1, gens.shape[-1])
    out = np.empty_like(flat)
    index = {perm: i for i, perm in enumerate(S3_ELEMENTS)}
    for row in range(flat.shape[0]):
        state = (0, 1, 2)
        for t in range(flat.shape[1]):
            state = _s3_compose(state, S3_GENERATORS[int(flat[row, t])])
            out[row, t] = S3_TARGET_BASE + index[state]
    return out.reshape(gens.shape)


def gen_group_comp(spec: TaskSpec):
    """Labeled S3-generator sequences with running-product targets."""
    if spec.kind != "group_comp":
        raise ValueError(f"expected group_comp spec, got {spec.kind!r}")
    rng = np.random.default_rng([spec.seed, 47])
    train_x = rng.integers(0, 2, size=(spec.n_train, spec.seq_len_train))
    data = {"train": (train_x, s3_targets(train_x)), "eval": {}}
    for length in spec.seq_len_eval:
        ev = np.random.default_rng([spec.seed, 53, length]).integers(
            0, 2, size=(spec.n_eval, length))
        data["eval"][length] = (ev, s3_targets(ev))
    return data


# ---------------------------------------------------------------------------
# tasks as training data
# ---------------------------------------------------------------------------

def _labeled_batch(spec: TaskSpec, batch_size: int, length: int, step: int):
    rng = np.random.default_rng([spec.seed, 61, step])
    if spec.kind == "parity":
        lo = max(1, length // 8)
        cut = int(rng.integers(lo, length + 1))  # mixed lengths help probes
        x = rng.integers(0, 2, size=(batch_size, cut))
        return x, parity_targets(x)
    if spec.kind == "group_comp":
        lo = max(1, length // 8)
        cut = int(rng.integers(lo, length + 1))
        x = rng.integers(0, 2, size=(batch_size, cut))
        return x, s3_targets(x)
    raise ValueError(f"{spec.kind} is not a labeled task")


def train_classifier_on_task(model: DecoderModel, spec: TaskSpec,
                             cfg: TrainConfig, run: Optional[TrainRun] = None,
                             metrics=None) -> TrainRun:
    """Per-position cross-entropy on a labeled task (parity / group_comp)."""
    params = {n: t for n, t in model.named_parameters().items() if t.requires_grad}
    run = run or TrainRun(stage=cfg.stage, variant=cfg.variant or spec.kind,
                          seed=cfg.seed)

    def loss_fn(step: int) -> Tensor:
        x, y = _labeled_batch(spec, cfg.batch_size, cfg.seq_len, step)
        logits = forward_lm(model, x)
        return cross_entropy(logits, y)

    return train_loop(cfg, run, loss_fn, params, metrics)


def _passkey_batch(spec: TaskSpec, batch_size: int, context_len: int, step: int):
    rng = np.random.default_rng([spec.seed, 67, step])
    rows = np.empty((batch_size, context_len + spec.passkey_len), dtype=np.int64)
    for i in range(batch_size):
        ctx, _, ans = passkey_sample(rng, context_len, spec.passkey_len)
        rows[i, :context_len] = ctx
        rows[i, context_len:] = ans
    return rows


def train_lm_on_passkey(model: DecoderModel, spec: TaskSpec, cfg: TrainConfig,
                        run: Optional[TrainRun] = None, metrics=None) -> TrainRun:
    """Next-token CE on the passkey distribution (teacher preparation)."""
    params = {n: t for n, t in model.named_parameters().items() if t.requires_grad}
    run = run or TrainRun(stage=cfg.stage, variant="passkey-lm", seed=cfg.seed)

    def loss_fn(step: int) -> Tensor:
        rows = _passkey_batch(spec, cfg.batch_size, cfg.seq_len, step)
        return cross_entropy(forward_lm(model, rows[:, :-1]), rows[:, 1:])

    return train_loop(cfg, run, loss_fn, params, metrics)


def distill_on_passkey(teacher: DecoderModel, student: DecoderModel,
                       spec: TaskSpec, cfg: TrainConfig,
                       run: Optional[TrainRun] = None, metrics=None) -> TrainRun:
    """Word-level KL from a passkey-trained teacher on the task distribution."""
    params = {n: t for n, t in student.named_parameters().items() if t.requires_grad}
    run = run or TrainRun(stage=cfg.stage, variant="passkey-distill", seed=cfg.seed)

    def loss_fn(step: int) -> Tensor:
        rows = _passkey_batch(spec, cfg.batch_size, cfg.seq_len, step)
        inputs = rows[:, :-1]
        logits_t = forward_lm(teacher, inputs)
        logits_s = forward_lm(student, inputs)
        return kd_loss_wordlevel(logits_t, logits_s)

    return train_loop(cfg, run, loss_fn, params, metrics)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def eval_perplexity(model: DecoderModel, corpus: np.ndarray, seq_len: int = 64,
                    max_windows: int = 16) -> float:
    """exp(mean next-token cross-entropy) over contiguous held-out windows."""
    span = seq_len + 1
    n_windows = min(max_windows, (len(corpus) - 1) // seq_len)
    if n_windows < 1:
        raise ValueError(f"corpus too short for seq_len {seq_len}")
    losses = []
    for i in range(n_windows):
        w = corpus[i * seq_len:i * seq_len + span]
        logits = forward_lm(model, w[:-1][None, :])
        losses.append(cross_entropy(logits, w[1:][None, :]).item())
    return float(np.exp(np.mean(losses)))


def _restricted_argmax(logits: np.ndarray, answer_ids: np.ndarray) -> np.ndarray:
    """Predicted token from the task's answer alphabet only."""
    sub = logits[..., answer_ids]
    return answer_ids[np.argmax(sub, axis=-1)]


def _labeled_accuracy(model, x, y, answer_ids, batch: int = 64) -> float:
    correct = total = 0
    for i in range(0, len(x), batch):
        logits = forward_lm(model, x[i:i + batch])
        pred = _restricted_argmax(logits.data, answer_ids)
        correct += int((pred == y[i:i + batch]).sum())
        total += y[i:i + batch].size
    return correct / total


def _passkey_accuracy(model, spec, rows, batch: int = 32) -> float:
    k = spec.passkey_len
    hits = 0
    for i in range(0, len(rows), batch):
        chunk = rows[i:i + batch]
        logits = forward_lm(model, chunk[:, :-1])
        # last k input positions (QUERY onward) predict the k answer tokens
        pred_slice = logits.data[:, -k:, :]
        pred = _restricted_argmax(pred_slice, spec.answer_ids)
        hits += int(np.all(pred == chunk[:, -k:], axis=1).sum())
    return hits / len(rows)


def eval_task_accuracy(model: DecoderModel, spec: TaskSpec) -> dict:
    """Exact-match accuracy plus a per-eval-length breakdown."""
    per_length: dict[int, float] = {}
    if spec.kind in ("parity", "group_comp"):
        data = gen_parity(spec) if spec.kind == "parity" else gen_group_comp(spec)
        for length, (x, y) in data["eval"].items():
            per_length[length] = _labeled_accuracy(model, x, y, spec.answer_ids)
    elif spec.kind == "passkey":
        for length in spec.seq_len_eval:
            rows, _ = passkey_dataset(spec, length, spec.n_eval, tag=1)
            per_length[length] = _passkey_accuracy(model, spec, rows)
    else:
        raise ValueError(f"no accuracy metric for task {spec.kind!r}")
    overall = float(np.mean(list(per_length.values())))
    return {"task": spec.kind, "overall": overall,
            "per_length": dict(sorted(per_length.items()))}


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Ablation grid: one row per metric, one column per variant."""

    columns: list[str]
    rows: dict[str, dict[str, float]]
    provenance: dict[str, dict] = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "columns": list(self.columns),
            "rows": {m: {k: v for k, v in sorted(vals.items())}
                     for m, vals in sorted(self.rows.items())},
            "provenance": {k: dict(sorted(v.items()))
                           for k, v in sorted(self.provenance.items())},
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def render_text(self) -> str:
        metrics = sorted(self.rows)
        width = max([len("metric")] + [len(m) for m in metrics]) + 2
        cw = {c: max(len(c), 12) + 2 for c in self.columns}
        lines = ["metric".ljust(width) + "".join(c.rjust(cw[c]) for c in self.columns)]
        for m in metrics:
            cells = []
            for c in self.columns:
                v = self.rows[m].get(c)
                cells.append(("-" if v is None else f"{v:.4f}").rjust(cw[c]))
            lines.append(m.ljust(width) + "".join(cells))
        return "\n".join(lines) + "\n"


def build_report(variants: list[tuple[str, DecoderModel]],
                 heldout: Optional[np.ndarray] = None,
                 seq_len: int = 64,
                 tasks: Optional[list[TaskSpec]] = None,
                 extra_metrics: Optional[dict[str, dict[str, float]]] = None,
                 dataset_seed: int = 0) -> EvalReport:
    """Evaluate each (tag, model) on the shared metrics and assemble the grid.

    Fails if variants disagree on vocabulary (they would not be comparable).
    """
    if not variants:
        raise ValueError("report needs at least one variant")
    vocabs = {m.config.vocab_size for _, m in variants}
    if len(vocabs) != 1:
        raise ValueError(f"variants must share a vocabulary, got sizes {sorted(vocabs)}")
    columns = [tag for tag, _ in variants]
    if len(set(columns)) != len(columns):
        raise ValueError("duplicate variant tags in report")
    rows: dict[str, dict[str, float]] = {}
    provenance: dict[str, dict] = {}
    for tag, m in variants:
        provenance[tag] = {"checkpoint_hash": model_hash(m),
                           "dataset_seed": dataset_seed}
        if heldout is not None:
            rows.setdefault("perplexity", {})[tag] = eval_perplexity(
                m, heldout, seq_len=seq_len)
        for spec in tasks or []:
            res = eval_task_accuracy(m, spec)
            rows.setdefault(f"{spec.kind}_accuracy", {})[tag] = res["overall"]
            for length, acc in res["per_length"].items():
                rows.setdefault(f"{spec.kind}_acc@{length}", {})[tag] = acc
    for metric, per_tag in (extra_metrics or {}).items():
        for tag, value in per_tag.items():
            if tag not in columns:
                raise ValueError(f"extra metric {metric!r} names unknown variant {tag!r}")
            rows.setdefault(metric, {})[tag] = value
    return EvalReport(columns=columns, rows=rows, provenance=provenance)
