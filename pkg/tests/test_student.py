import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY, assert_bit_equal, random_sentence, scored_examples
from dse import encoder as enc
from dse.data import TaskKind
from dse.distill import LossConfig, student_batch_loss
from dse.encoder import COUNTERS, EncoderConfig, InputError, build_single_input
from dse.numkernel import SeededRng, ShapeError, finite_diff_check, kink_signature
from dse.student import (
    StudentModel,
    embed_batch,
    embed_from_hidden,
    embed_sentence,
    pair_features,
    similarity_head,
    student_logits,
    student_score,
)


def scalar_head(W, w, u, v):
    """Loop-by-loop w . relu(W h) with h = [u, v, u*v, |u-v|]."""
    h = list(u) + list(v) + [a * b for a, b in zip(u, v)] + [abs(a - b) for a, b in zip(u, v)]
    hidden = []
    for row in W:
        acc = 0.0
        for wi, hi in zip(row, h):
            acc += wi * hi
        hidden.append(max(acc, 0.0))
    out = []
    for row in w:
        acc = 0.0
        for wi, ai in zip(row, hidden):
            acc += wi * ai
        out.append(acc)
    return out


@pytest.fixture(scope="module")
def student():
    return StudentModel.init(TINY, TaskKind.BINARY, 3)


@pytest.mark.parametrize("layers", [2, 4, 6])
def test_embedding_dimension(layers):
    cfg = EncoderConfig(num_layers=layers, hidden=8, heads=2, ffn=16, max_len=12, vocab_size=32)
    s = StudentModel.init(cfg, TaskKind.BINARY, 0, head_hidden=5)
    p = min(4, layers)
    assert s.pooled_layers == p and s.dim == p * 8
    assert embed_sentence(s, [5, 6]).shape == (p * 8,)
    assert s.head_W.shape == (5, 4 * p * 8)


def test_pair_features_layout():
    np.testing.assert_array_equal(pair_features(np.array([1.0, 2.0]), np.array([3.0, 4.0])), [1, 2, 3, 4, 3, 8, 2, 2])


def test_equal_embeddings_zero_abs_block(rng):
    u = rng.normal((6,))
    assert np.all(pair_features(u, u.copy())[18:] == 0.0)


def test_zero_head_gives_zero(student):
    s = student.copy()
    s.head_W.value[...] = 0.0
    u, v = SeededRng(0).normal((s.dim,)), SeededRng(1).normal((s.dim,))
    assert np.all(similarity_head(s, u, v) == 0.0)


def test_head_matches_scalar_loop_oracle():
    rng = SeededRng(99)
    d, r = 6, 5
    cfg = EncoderConfig(num_layers=1, hidden=d, heads=1, ffn=8, max_len=8, vocab_size=16)
    s = StudentModel.init(cfg, TaskKind.MULTICLASS, 0, head_hidden=r)
    for _ in range(100):
        s.head_W.value[...] = rng.normal((r, 4 * d))
        s.head_w.value[...] = rng.normal((3, r))
        u, v = rng.normal((d,)), rng.normal((d,))
        ref = scalar_head(s.head_W.value.tolist(), s.head_w.value.tolist(), u.tolist(), v.tolist())
        np.testing.assert_allclose(similarity_head(s, u, v), ref, rtol=0, atol=1e-12)


def test_head_shape_errors(student):
    with pytest.raises(ShapeError):
        similarity_head(student, np.zeros(student.dim), np.zeros(student.dim + 1))
    with pytest.raises(ShapeError):
        similarity_head(student, np.zeros(3), np.zeros(3))


def test_mocked_hidden_states_pool_only_real_non_cls():
    L, H, T = 5, 3, 7
    mask = np.array([1, 1, 1, 1, 1, 0, 0])  # CLS, 3 tokens, SEP, 2 PAD
    consts = [np.full(H, float(l + 1)) for l in range(L + 1)]
    rng = np.random.default_rng(0)
    hidden = []
    for l in range(L + 1):
        h = rng.normal(size=(T, H))
        h[1:5] = consts[l]
        hidden.append(h)
    emb = embed_from_hidden(hidden, mask, 4)
    np.testing.assert_array_equal(emb, np.concatenate(consts[L - 3 :]))
    for h in hidden:
        h[0] = 1e6
        h[5:] = -1e6
    np.testing.assert_array_equal(embed_from_hidden(hidden, mask, 4), emb)


def test_embedding_padding_invariance(student):
    rng = SeededRng(4)
    for _ in range(20):
        y = random_sentence(rng, TINY.vocab_size, 1, 8)
        short = build_single_input(y, len(y) + 2)
        long = build_single_input(y, TINY.max_len)
        a = embed_from_hidden(enc.encode(short, student.encoder), short.mask, student.pooled_layers)
        b = embed_from_hidden(enc.encode(long, student.encoder), long.mask, student.pooled_layers)
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_batch_embeddings_match_single(student):
    rng = SeededRng(5)
    sents = [random_sentence(rng, TINY.vocab_size, 1, 10) for _ in range(9)]
    batch = embed_batch(student, sents, batch_size=4)
    for y, row in zip(sents, batch):
        np.testing.assert_allclose(row, embed_sentence(student, y), rtol=0, atol=1e-12)


def test_embed_empty_sentence_rejected(student):
    with pytest.raises(InputError):
        embed_sentence(student, [])


def test_student_score_is_composition(student):
    y, z = [5, 6, 7], [8, 9]
    manual = similarity_head(student, embed_sentence(student, y), embed_sentence(student, z))
    assert_bit_equal(student_score(student, y, z), manual)


def test_shared_encoder_same_embedding_either_side(student):
    y = [10, 11, 12]
    assert_bit_equal(embed_sentence(student, y), embed_sentence(student, y))
    assert len([k for k in student.parameters() if k.startswith("enc.")]) == len(student.encoder.params)


def test_cached_embeddings_rescore_bit_identically(student):
    rng = SeededRng(6)
    sents = [random_sentence(rng, TINY.vocab_size, 1, 8) for _ in range(5)]
    cache = {i: embed_sentence(student, y) for i, y in enumerate(sents)}
    for i in range(5):
        for j in range(5):
            assert_bit_equal(similarity_head(student, cache[i], cache[j]), student_score(student, sents[i], sents[j]))


def test_asymmetry_documented():
    s = StudentModel.init(TINY, TaskKind.BINARY, 8)
    ab, ba = student_score(s, [5, 6], [30, 31, 32]), student_score(s, [30, 31, 32], [5, 6])
    assert np.all(np.isfinite(ab)) and np.all(np.isfinite(ba))
    assert not np.array_equal(ab, ba)  # h is order-sensitive


def test_student_score_counts(student):
    p0, h0 = COUNTERS.snapshot()
    student_score(student, [5], [6])
    p1, h1 = COUNTERS.snapshot()
    assert (p1 - p0, h1 - h0) == (2, 1)


def test_student_logits_match_scores(student):
    pairs = [([5, 6], [7]), ([8], [9, 10, 11]), ([12], [12])]
    batch = student_logits(student, pairs, batch_size=2)
    for row, (a, b) in zip(batch, pairs):
        np.testing.assert_allclose(row, student_score(student, a, b), rtol=0, atol=1e-12)


def test_head_shape_invariant():
    s = StudentModel.init(TINY, TaskKind.REGRESSION, 0)
    with pytest.raises(ShapeError):
        StudentModel(s.encoder, s.head_W, s.head_w, TaskKind.BINARY, s.pooled_layers)


@pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0])
@pytest.mark.parametrize("task", list(TaskKind))
def test_full_student_loss_gradient(alpha, task):
    s = StudentModel.init(TINY, task, 2, head_hidden=8)
    examples = scored_examples(task, 3, TINY.vocab_size, seed=1)
    cfg = LossConfig(alpha, task)
    student_batch_loss(s, examples, cfg)

    def loss():
        kinks = []
        value = student_batch_loss(s, examples, cfg, backward=False, kinks=kinks)
        return value, kink_signature(kinks)

    res = finite_diff_check(loss, s.parameters(), h=1e-5, detail=True)
    assert not res.unexplained, res.unexplained[:5]
    assert len(res.skipped) < 0.05 * res.checked


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_head_finite_and_order_of_blocks(u, v):
    cfg = EncoderConfig(num_layers=1, hidden=4, heads=1, ffn=4, max_len=8, vocab_size=16)
    s = StudentModel.init(cfg, TaskKind.BINARY, 0, head_hidden=3)
    u, v = np.array(u), np.array(v)
    h = pair_features(u, v)
    np.testing.assert_array_equal(h[:4], u)
    np.testing.assert_array_equal(h[12:], np.abs(u - v))
    out = similarity_head(s, u, v)
    assert out.shape == (2,) and np.all(np.isfinite(out))
    assert math.isclose(float(out.sum()), sum(scalar_head(s.head_W.value, s.head_w.value, u, v)), abs_tol=1e-12)
