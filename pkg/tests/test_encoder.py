import numpy as np
import pytest

from match2.autograd import Tensor, precision
from match2.encoder import (
    EncoderConfig, MultiHeadAttention, StackedEncoder, encode, multi_head_attention, parameter_count, split_segments,
)
from match2.errors import ConfigError, ContractError
from match2.gradcheck import check_parameters
from match2.text import EncodedBatch, build_vocab, encode_pair

WORDS = "alpha beta gamma delta eps zeta eta theta"


@pytest.fixture
def vocab():
    return build_vocab([WORDS])


def batch(vocab, pairs, mf=4, ms=5):
    return EncodedBatch.stack([encode_pair(a, b, mf, ms, vocab) for a, b in pairs])


def test_default_shapes(vocab):
    enc = StackedEncoder(EncoderConfig(len(vocab)), np.random.default_rng(0))
    # len 10 = 3 specials + 3 + 4
    out = enc(batch(vocab, [("alpha beta", "gamma"), ("eta", "theta zeta")], 3, 4))
    assert out.pooled.shape == (2, 64)
    assert len(out.sequence) == 4 and all(s.shape == (2, 10, 64) for s in out.sequence)
    assert np.all(np.isfinite(out.pooled.data))


def test_config_validation():
    EncoderConfig(10, hidden=8, heads=2)
    with pytest.raises(ConfigError):
        EncoderConfig(10, hidden=10, heads=4)
    with pytest.raises(ConfigError):
        EncoderConfig(10, layers=0)
    assert EncoderConfig(10, hidden=8, heads=2).ffn == 32


def test_parameter_count_formula(vocab):
    for cfg in (EncoderConfig(len(vocab)), EncoderConfig(len(vocab), layers=2, hidden=16, heads=2, ffn=24, max_position=40)):
        assert StackedEncoder(cfg, np.random.default_rng(0)).num_parameters() == parameter_count(cfg)


def test_attention_rows_sum_to_one_and_pads_get_zero(vocab):
    enc = StackedEncoder(EncoderConfig(len(vocab), layers=2, hidden=16, heads=2), np.random.default_rng(0))
    b = batch(vocab, [("alpha", "beta"), ("gamma delta eps", "zeta eta theta alpha")])
    out = enc(b)
    for w in out.attention:
        keep = b.mask.astype(bool)[:, None, None, :]
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-6)
        assert np.all(w[np.broadcast_to(~keep, w.shape)] == 0)


def test_single_token_attends_to_itself():
    cfg = EncoderConfig(8, hidden=8, heads=2)
    attn = MultiHeadAttention(cfg, np.random.default_rng(0))
    _, w = multi_head_attention(Tensor(np.random.default_rng(1).normal(size=(1, 1, 8))), np.ones((1, 1)), attn)
    np.testing.assert_allclose(w, 1.0)


def test_identical_keys_split_attention():
    cfg = EncoderConfig(8, hidden=8, heads=2)
    attn = MultiHeadAttention(cfg, np.random.default_rng(0))
    attn.query.bias.data[:] = 0
    row = np.random.default_rng(2).normal(size=8)
    _, w = multi_head_attention(Tensor(np.stack([row, row])[None]), np.ones((1, 2)), attn)
    np.testing.assert_allclose(w, 0.5, atol=1e-7)


def test_pad_tail_content_is_ignored(vocab):
    enc = StackedEncoder(EncoderConfig(len(vocab), layers=2, hidden=16, heads=2), np.random.default_rng(0))
    b = batch(vocab, [("alpha", "beta gamma")])
    ref = enc(b)
    b.ids[0, b.mask[0] == 0] = np.random.default_rng(0).integers(4, len(vocab), size=int((b.mask[0] == 0).sum()))
    b.segments[0, b.mask[0] == 0] = 1
    out = enc(b)
    n = int(b.mask[0].sum())
    assert np.array_equal(out.pooled.data, ref.pooled.data)
    for s, r in zip(out.sequence, ref.sequence):
        assert np.array_equal(s.data[:, :n], r.data[:, :n])


def test_over_length_is_contract_error(vocab):
    enc = StackedEncoder(EncoderConfig(len(vocab), layers=1, hidden=8, heads=2, max_position=8), np.random.default_rng(0))
    with pytest.raises(ContractError):
        enc(batch(vocab, [("alpha", "beta")], 4, 5))


def test_deterministic_infer(vocab):
    cfg = EncoderConfig(len(vocab), layers=2, hidden=16, heads=2)
    b = batch(vocab, [("alpha beta", "gamma")])
    a = StackedEncoder(cfg, np.random.default_rng(3))(b).pooled.data
    c = StackedEncoder(cfg, np.random.default_rng(3))(b).pooled.data
    assert np.array_equal(a, c)


def test_split_segments_layout(vocab):
    enc = StackedEncoder(EncoderConfig(len(vocab), layers=4, hidden=8, heads=2), np.random.default_rng(0))
    b = EncodedBatch.stack([encode_pair("alpha beta", "gamma", 3, 3, vocab)])
    out = enc(b)
    qs, ans, qm, am = split_segments(out)
    assert len(qs) == len(ans) == 4
    assert qm[0].tolist() == [True, True, False] and am[0].tolist() == [True, False, False]
    np.testing.assert_array_equal(qs[2].data[0, :2], out.sequence[2].data[0, 1:3])
    np.testing.assert_array_equal(ans[1].data[0, 0], out.sequence[1].data[0, 4])
    assert np.all(qs[0].data[0, 2] == 0) and np.all(ans[0].data[0, 1:] == 0)


def test_split_segments_needs_boundaries(vocab):
    enc = StackedEncoder(EncoderConfig(len(vocab), layers=1, hidden=8, heads=2), np.random.default_rng(0))
    out = enc(batch(vocab, [("alpha", "beta")]))
    out.first_len = None
    with pytest.raises(ContractError):
        split_segments(out)


def test_attention_projection_grads(vocab):
    rng = np.random.default_rng(0)
    with precision(np.float64):
        attn = MultiHeadAttention(EncoderConfig(8, hidden=8, heads=2, init_std=0.3), rng).astype(np.float64)
        x = Tensor(rng.normal(size=(2, 4, 8)))
        mask = np.array([[1, 1, 1, 0], [1, 1, 1, 1]])
        proj = rng.normal(size=(2, 4, 8))
        report = check_parameters(lambda: (multi_head_attention(x, mask, attn)[0] * proj).sum(), attn.named_parameters())
    assert max(report.values()) < 1e-3
