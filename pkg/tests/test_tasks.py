"""Generators vs brute-force oracles; evaluation metrics; report structure."""

from functools import reduce
from operator import xor

import numpy as np
import pytest

from rwkvlab.model import ModelConfig, build_teacher
from rwkvlab.tasks import (
    CHAR_ALPHABET,
    DIGITS,
    KEY_MARK,
    QUERY_MARK,
    S3_ELEMENTS,
    S3_GENERATORS,
    S3_TARGET_BASE,
    TaskSpec,
    build_report,
    char_source_modes,
    eval_perplexity,
    eval_task_accuracy,
    gen_char_corpus,
    gen_group_comp,
    gen_parity,
    gen_passkey,
    parity_targets,
    passkey_dataset,
    passkey_sample,
    s3_targets,
)


def lm_cfg(vocab=16, **kw):
    base = dict(vocab_size=vocab, d_model=8, n_layers=1, n_heads=2, n_kv_heads=2,
                head_dim=4, d_ffn=16, max_seq_len=64, seed=0)
    base.update(kw)
    return ModelConfig(**base)


# --- char corpus -------------------------------------------------------------

def test_char_corpus_deterministic_and_disjoint():
    spec = TaskSpec(kind="char_lm", seed=9, n_train=3000, n_eval=500)
    t1, h1 = gen_char_corpus(spec)
    t2, h2 = gen_char_corpus(spec)
    assert t1.tobytes() == t2.tobytes() and h1.tobytes() == h2.tobytes()
    assert len(t1) == 3000 and len(h1) == 500
    assert np.all(t1 < CHAR_ALPHABET)


def test_char_corpus_count_model_recovers_source_ranking():
    spec = TaskSpec(kind="char_lm", seed=5, n_train=120_000, n_eval=100)
    train, _ = gen_char_corpus(spec)
    modes = char_source_modes(spec.seed)
    a = CHAR_ALPHABET
    counts = np.zeros((a ** 3, a), dtype=np.int64)
    for t in range(3, len(train)):
        ctx = (train[t - 3] * a + train[t - 2]) * a + train[t - 1]
        counts[ctx, train[t]] += 1
    visited = counts.sum(axis=1) >= 25
    assert visited.sum() > 100
    fit_top1 = counts[visited].argmax(axis=1)
    agree = (fit_top1 == modes[visited]).mean()
    assert agree >= 0.90


# --- passkey -----------------------------------------------------------------

def test_passkey_sample_structure_and_exactly_one_key():
    rng = np.random.default_rng(3)
    for _ in range(50):
        ctx, qpos, ans = passkey_sample(rng, 64, 4)
        assert qpos == 63 and ctx[qpos] == QUERY_MARK
        assert (ctx == KEY_MARK).sum() == 1
        start = int(np.argmax(ctx == KEY_MARK))
        np.testing.assert_array_equal(ctx[start + 1:start + 5], ans)
        # digit tokens appear only inside the embedded key
        digit_positions = np.isin(ctx, DIGITS).nonzero()[0]
        assert set(digit_positions) == set(range(start + 1, start + 5))


def test_passkey_key_at_position_zero_round_trips():
    rng = np.random.default_rng(0)
    for _ in range(200):
        ctx, _, ans = passkey_sample(rng, 16, 3)
        if ctx[0] == KEY_MARK:
            np.testing.assert_array_equal(ctx[1:4], ans)
            return
    pytest.fail("never sampled a key at position 0")


def test_passkey_two_seeds_differ():
    s1 = gen_passkey(TaskSpec(kind="passkey", seed=1, seq_len_train=64))
    s2 = gen_passkey(TaskSpec(kind="passkey", seed=2, seq_len_train=64))
    assert s1[0].tobytes() != s2[0].tobytes()


def test_passkey_dataset_shapes_and_determinism():
    spec = TaskSpec(kind="passkey", seed=4, seq_len_train=32, passkey_len=4)
    rows, starts = passkey_dataset(spec, 32, 20)
    rows2, _ = passkey_dataset(spec, 32, 20)
    assert rows.shape == (20, 36)
    assert rows.tobytes() == rows2.tobytes()
    np.testing.assert_array_equal(rows[:, 31], QUERY_MARK)
    assert np.all(starts == 31)


def test_passkey_rejects_key_longer_than_context():
    with pytest.raises(ValueError, match="shorter"):
        TaskSpec(kind="passkey", seed=0, seq_len_train=4, passkey_len=4)


# --- parity ------------------------------------------------------------------

def test_parity_hand_cases():
    np.testing.assert_array_equal(parity_targets(np.zeros(4, dtype=int)),
                                  [0, 0, 0, 0])
    np.testing.assert_array_equal(parity_targets(np.array([1])), [1])
    np.testing.assert_array_equal(parity_targets(np.array([1, 0, 1, 1])),
                                  [1, 1, 0, 1])


def test_parity_targets_match_xor_fold_oracle():
    spec = TaskSpec(kind="parity", seed=6, seq_len_train=16,
                    seq_len_eval=(16, 32), n_train=50, n_eval=20)
    data = gen_parity(spec)
    for x, y in [data["train"], *data["eval"].values()]:
        for row_x, row_y in zip(x, y):
            for t in range(len(row_x)):
                assert row_y[t] == reduce(xor, [int(b) for b in row_x[:t + 1]])


def test_parity_generation_deterministic():
    spec = TaskSpec(kind="parity", seed=6, n_train=10)
    a = gen_parity(spec)["train"][0]
    b = gen_parity(spec)["train"][0]
    assert a.tobytes() == b.tobytes()


# --- group composition ---------------------------------------------------------

def brute_force_s3(word):
    """Independent composition: repeatedly apply generators to (0,1,2)."""
    state = (0, 1, 2)
    out = []
    for g in word:
        gen = S3_GENERATORS[int(g)]
        state = tuple(gen[state[i]] for i in range(3))
        out.append(S3_TARGET_BASE + S3_ELEMENTS.index(state))
    return out


def test_group_comp_matches_brute_force_on_1000_samples():
    spec = TaskSpec(kind="group_comp", seed=7, seq_len_train=12, n_train=1000)
    x, y = gen_group_comp(spec)["train"]
    for i in range(1000):
        assert list(y[i]) == brute_force_s3(x[i])


def test_group_targets_cover_six_classes():
    spec = TaskSpec(kind="group_comp", seed=8, seq_len_train=24, n_train=200)
    _, y = gen_group_comp(spec)["train"]
    assert set(np.unique(y)) == set(range(S3_TARGET_BASE, S3_TARGET_BASE + 6))


# --- evaluation ----------------------------------------------------------------

def test_uniform_logits_perplexity_equals_vocab():
    m = build_teacher(lm_cfg(vocab=16))
    m.head.data[:] = 0.0  # logits identically zero -> uniform distribution
    corpus = np.random.default_rng(1).integers(0, 16, size=600)
    assert eval_perplexity(m, corpus, seq_len=16) == pytest.approx(16.0, rel=1e-4)


def test_perfect_predictor_perplexity_is_one():
    m = build_teacher(lm_cfg(vocab=1))
    corpus = np.zeros(300, dtype=np.int64)
    assert eval_perplexity(m, corpus, seq_len=16) == pytest.approx(1.0, abs=1e-6)


def test_untrained_parity_accuracy_near_chance():
    m = build_teacher(lm_cfg(vocab=2, max_seq_len=64))
    spec = TaskSpec(kind="parity", seed=11, seq_len_train=32, seq_len_eval=(32,),
                    n_eval=60)
    res = eval_task_accuracy(m, spec)
    assert 0.35 < res["overall"] < 0.65  # binomial noise around 0.5


def test_eval_lengths_cover_configured_buckets():
    m = build_teacher(lm_cfg(vocab=2, max_seq_len=64))
    spec = TaskSpec(kind="parity", seed=12, seq_len_train=16,
                    seq_len_eval=(8, 16, 24), n_eval=10)
    res = eval_task_accuracy(m, spec)
    assert sorted(res["per_length"]) == [8, 16, 24]


# --- report ----------------------------------------------------------------------

def test_report_single_variant_single_column():
    m = build_teacher(lm_cfg(vocab=16))
    corpus = np.random.default_rng(2).integers(0, 16, size=600)
    rep = build_report([("ARWKV", m)], heldout=corpus, seq_len=16)
    assert rep.columns == ["ARWKV"]
    assert "perplexity" in rep.rows
    assert rep.provenance["ARWKV"]["checkpoint_hash"]


def test_report_matches_ablation_grid_columns():
    models = [(tag, build_teacher(lm_cfg(vocab=16, seed=i)))
              for i, tag in enumerate(
                  ["ARWKV", "active-MLP", "gate+active-MLP", "from-larger"])]
    corpus = np.random.default_rng(3).integers(0, 16, size=600)
    rep = build_report(models, heldout=corpus, seq_len=16)
    assert rep.columns == ["ARWKV", "active-MLP", "gate+active-MLP", "from-larger"]
    text = rep.render_text()
    for tag in rep.columns:
        assert tag in text.splitlines()[0]


def test_report_regeneration_is_byte_identical():
    m = build_teacher(lm_cfg(vocab=16))
    corpus = np.random.default_rng(4).integers(0, 16, size=600)
    r1 = build_report([("ARWKV", m)], heldout=corpus, seq_len=16)
    r2 = build_report([("ARWKV", m)], heldout=corpus, seq_len=16)
    assert r1.to_json() == r2.to_json()
    assert r1.render_text() == r2.render_text()


def test_report_rejects_vocab_mismatch_and_unknown_tags():
    a = build_teacher(lm_cfg(vocab=16))
    b = build_teacher(lm_cfg(vocab=8))
    with pytest.raises(ValueError, match="vocabulary"):
        build_report([("x", a), ("y", b)])
    with pytest.raises(ValueError, match="unknown variant"):
        build_report([("x", a)], extra_metrics={"kl": {"nope": 1.0}})
