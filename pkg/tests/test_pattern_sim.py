import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from match2 import ops
from match2.autograd import Tensor, precision
from match2.errors import ContractError
from match2.gradcheck import check_parameters
from match2.model import (
    SIMILARITY_FUNCTIONS, MatchingPattern, PatternCompressor, compress, matching_pattern, pattern_similarity,
    question_pair_similarity,
)

from conftest import tiny_model, vocab_for


def scalar_s(x, y, fn):
    """Direct formulas on two vectors."""
    if fn == "dot":
        return float(np.dot(x, y))
    if fn == "cos":
        nx, ny = np.linalg.norm(x), np.linalg.norm(y)
        return 0.0 if nx == 0 or ny == 0 else float(np.dot(x, y) / (nx * ny))
    if fn == "l1":
        return 1.0 / (1.0 + np.abs(x - y).sum())
    if fn == "l2":
        return 1.0 / (1.0 + np.sqrt(((x - y) ** 2).sum()))
    p = np.exp(x - x.max())
    p /= p.sum()
    q = np.exp(y - y.max())
    q /= q.sum()
    m = (p + q) / 2

    def kl(a, b):
        keep = a > 0
        return float((a[keep] * np.log2(a[keep] / b[keep])).sum())

    return 1.0 - (0.5 * kl(p, m) + 0.5 * kl(q, m))


def features(rng, b, t, h, lengths, dtype=np.float64):
    x = rng.normal(size=(b, t, h)).astype(dtype)
    mask = np.arange(t)[None, :] < np.asarray(lengths)[:, None]
    return Tensor(x * mask[:, :, None]), mask


def pattern_oracle(q, a, qm, am):
    b, m, _ = q.shape
    w = a.shape[1]
    out = np.zeros((b, m, w))
    for bi in range(b):
        for i in range(m):
            for j in range(w):
                if qm[bi, i] and am[bi, j]:
                    out[bi, i, j] = sum(float(q[bi, i, k]) * float(a[bi, j, k]) for k in range(q.shape[2]))
    return out


# ---------------------------------------------------------------------------
# matching patterns


def test_pattern_shape():
    rng = np.random.default_rng(0)
    q, qm = features(rng, 1, 3, 8, [3])
    a, am = features(rng, 1, 5, 8, [5])
    assert matching_pattern([q, q], [a, a], qm, am).tensor.shape == (1, 2, 3, 5)


def test_orthogonal_features_give_zero():
    q = Tensor(np.array([[[1.0, 0.0]]]))
    a = Tensor(np.array([[[0.0, 1.0]]]))
    p = matching_pattern([q], [a], np.ones((1, 1), bool), np.ones((1, 1), bool))
    assert p.tensor.data.item() == 0.0


def test_pattern_matches_loop_oracle_float32():
    rng = np.random.default_rng(1)
    with precision(np.float32):
        qs, ans = [], []
        for _ in range(2):
            q, qm = features(rng, 2, 4, 16, [4, 2], np.float32)
            a, am = features(rng, 2, 6, 16, [6, 3], np.float32)
            qs.append(q)
            ans.append(a)
        p = matching_pattern(qs, ans, qm, am)
    assert p.tensor.dtype == np.float32
    for layer in range(2):
        ref = pattern_oracle(qs[layer].data, ans[layer].data, qm, am)
        np.testing.assert_allclose(p.tensor.data[:, layer], ref, atol=1e-5)
    assert np.all(p.tensor.data[1, :, 2:, :] == 0) and np.all(p.tensor.data[1, :, :, 3:] == 0)


def test_layer_mismatch():
    q = Tensor(np.zeros((1, 2, 4)))
    with pytest.raises(ContractError):
        matching_pattern([q, q], [q], np.ones((1, 2), bool), np.ones((1, 2), bool))


# ---------------------------------------------------------------------------
# pattern similarity


def make_patterns(rng, b=2, layers=2, m=3, n=4, w=5, m_len=(3, 2), n_len=(4, 3), w_len=(5, 3), dtype=np.float64):
    qm = np.arange(m)[None] < np.array(m_len)[:, None]
    nm = np.arange(n)[None] < np.array(n_len)[:, None]
    am = np.arange(w)[None] < np.array(w_len)[:, None]
    pu = rng.normal(size=(b, layers, m, w)) * (qm[:, None, :, None] & am[:, None, None, :])
    pa = rng.normal(size=(b, layers, n, w)) * (nm[:, None, :, None] & am[:, None, None, :])
    return (MatchingPattern(Tensor(pu.astype(dtype)), qm, am), MatchingPattern(Tensor(pa.astype(dtype)), nm, am))


@pytest.mark.parametrize("fn", SIMILARITY_FUNCTIONS)
def test_similarity_brute_force(fn):
    rng = np.random.default_rng(2)
    pu, pa = make_patterns(rng, b=1, layers=1, m=2, n=2, w=3, m_len=(2,), n_len=(2,), w_len=(3,))
    ps = pattern_similarity(pu, pa, fn).tensor.data
    for i in range(2):
        for j in range(2):
            assert ps[0, 0, i, j] == pytest.approx(scalar_s(pu.tensor.data[0, 0, i], pa.tensor.data[0, 0, j], fn), abs=1e-6)


@pytest.mark.parametrize("fn", SIMILARITY_FUNCTIONS)
def test_similarity_masked_cells_zero_and_range(fn):
    rng = np.random.default_rng(3)
    pu, pa = make_patterns(rng)
    ps = pattern_similarity(pu, pa, fn)
    joint = ps.mask[:, None]
    vals = ps.tensor.data
    assert np.all(vals[np.broadcast_to(~joint, vals.shape)] == 0)
    inside = vals[np.broadcast_to(joint, vals.shape)]
    lo, hi = {"dot": (-np.inf, np.inf), "cos": (-1, 1), "l1": (0, 1), "l2": (0, 1), "jss": (0, 1)}[fn]
    assert np.all(inside >= lo - 1e-12) and np.all(inside <= hi + 1e-12)
    if fn in ("l1", "l2"):
        assert np.all(inside > 0)


@pytest.mark.parametrize("fn", SIMILARITY_FUNCTIONS)
def test_transpose_symmetry_exact(fn):
    rng = np.random.default_rng(4)
    pu, pa = make_patterns(rng)
    ab = pattern_similarity(pu, pa, fn).tensor.data
    ba = pattern_similarity(pa, pu, fn).tensor.data
    assert np.array_equal(ab, np.swapaxes(ba, -1, -2))


def test_answer_length_mismatch():
    rng = np.random.default_rng(0)
    pu, _ = make_patterns(rng, w=5)
    _, pa = make_patterns(rng, w=4, w_len=(4, 3))
    with pytest.raises(ContractError):
        pattern_similarity(pu, pa, "dot")


def test_dot_orthogonal():
    assert ops.pairwise_similarity(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]]), "dot").data.item() == 0.0


def test_jss_disjoint_supports_is_zero():
    x = Tensor([[40.0, -40.0]], dtype=np.float64)
    y = Tensor([[-40.0, 40.0]], dtype=np.float64)
    assert ops.pairwise_similarity(x, y, "jss").data.item() == pytest.approx(0.0, abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (3, 6), elements=st.floats(-5, 5)))
def test_self_similarity_is_one(x):
    for fn in ("cos", "l1", "l2", "jss"):
        d = np.diagonal(ops.pairwise_similarity(Tensor(x), Tensor(x), fn).data)
        # cos is defined as 0 when a squared norm underflows to 0
        expected = np.where((x * x).sum(-1) > 0, 1.0, 0.0) if fn == "cos" else 1.0
        np.testing.assert_allclose(d, expected, atol=1e-6)


def test_cos_zero_norm_defined_zero():
    out = ops.pairwise_similarity(Tensor([[0.0, 0.0]]), Tensor([[1.0, 2.0]]), "cos").data
    assert out.item() == 0.0


def test_masked_positions_do_not_leak():
    rng = np.random.default_rng(5)
    pu, pa = make_patterns(rng)
    comp = PatternCompressor(2, 8, rng, 0.3).astype(np.float64)
    for fn in SIMILARITY_FUNCTIONS:
        ref = pattern_similarity(pu, pa, fn)
        v_ref = compress(ref, comp, "infer").data
        noisy_u = pu.tensor.data.copy()
        invalid = ~(pu.question_mask[:, None, :, None] & pu.answer_mask[:, None, None, :])
        noisy_u[np.broadcast_to(invalid, noisy_u.shape)] = 99.0
        noisy = pattern_similarity(MatchingPattern(Tensor(noisy_u), pu.question_mask, pu.answer_mask), pa, fn)
        joint = np.broadcast_to(ref.mask[:, None], ref.tensor.shape)
        assert np.array_equal(noisy.tensor.data[joint], ref.tensor.data[joint])
        assert np.array_equal(compress(noisy, comp, "infer").data, v_ref)


@pytest.mark.parametrize("fn", SIMILARITY_FUNCTIONS)
def test_similarity_grads(fn):
    rng = np.random.default_rng(6)
    pu, pa = make_patterns(rng)
    for p in (pu, pa):
        p.tensor.requires_grad = True
    proj = rng.normal(size=(2, 2, 3, 4))
    report = check_parameters(lambda: (pattern_similarity(pu, pa, fn).tensor * proj).sum(), {"pu": pu.tensor, "pa": pa.tensor})
    assert max(report.values()) < 1e-3


# ---------------------------------------------------------------------------
# compression


def test_compress_shape_and_zero_input():
    rng = np.random.default_rng(7)
    comp = PatternCompressor(2, 8, rng, 0.3).astype(np.float64)
    comp.bn1.beta.data = rng.normal(size=2)
    comp.bn2.beta.data = rng.normal(size=8)
    outs = []
    for lengths in ((3, 3), (2, 4)):
        mask = np.zeros((1, 3, 4), bool)
        mask[0, : lengths[0], : lengths[1]] = True
        from match2.model import PatternSimilarityTensor

        ps = PatternSimilarityTensor(Tensor(np.zeros((1, 2, 3, 4))), mask)
        v = compress(ps, comp, "infer").data
        assert v.shape == (1, 8)
        outs.append(v)
    # all-zero input: v_a comes from the BN shift alone; with full-grid masks it is input independent
    full = PatternSimilarityTensor(Tensor(np.zeros((2, 2, 3, 4))), np.ones((2, 3, 4), bool))
    v = compress(full, comp, "infer").data
    assert np.array_equal(v[0], v[1])


def test_compress_grads():
    rng = np.random.default_rng(8)
    pu, pa = make_patterns(rng)
    comp = PatternCompressor(2, 8, rng, 0.3).astype(np.float64)
    ps = pattern_similarity(pu, pa, "dot")
    ps.tensor.requires_grad = True
    proj = rng.normal(size=(2, 8))
    for mode in ("train", "infer"):
        params = dict(comp.named_parameters(), ps=ps.tensor)
        report = check_parameters(lambda: (compress(ps, comp, mode) * proj).sum(), params)
        assert max(report.values()) < 1e-3


# ---------------------------------------------------------------------------
# representation route


def test_v_q_is_exactly_pooled():
    from match2 import synthetic
    from match2.text import encode_batch

    recs = synthetic.equality_corpus(4)
    vocab = vocab_for(recs)
    model = tiny_model(vocab, ablation="Q-only")
    b = encode_batch(recs, vocab, 5, 12)
    out = model(b)
    assert out.v_q is out.encodings["qq"].pooled
    assert question_pair_similarity(out.encodings["qq"]) is out.encodings["qq"].pooled


def test_v_q_default_dimension_and_order_sensitivity():
    from match2.encoder import EncoderConfig, StackedEncoder
    from match2.text import EncodedBatch, build_vocab, encode_pair

    vocab = build_vocab(["how to kill a process", "terminate running job"])
    enc = StackedEncoder(EncoderConfig(len(vocab)), np.random.default_rng(0))
    a = encode_pair("how to kill a process", "terminate running job", 24, 24, vocab)
    b = encode_pair("terminate running job", "how to kill a process", 24, 24, vocab)
    same = encode_pair("how to kill a process", "how to kill a process", 24, 24, vocab)
    out = enc(EncodedBatch.stack([a, b, same]))
    v = question_pair_similarity(out).data
    assert v.shape == (3, 64)
    assert not np.allclose(v[0], v[1])
    assert np.all(np.isfinite(v[2])) and np.abs(v[2]).sum() > 0
