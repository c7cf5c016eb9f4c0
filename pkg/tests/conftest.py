import numpy as np
import pytest

from match2.encoder import EncoderConfig
from match2.model import Match2, Match2Config
from match2.text import build_vocab


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model(vocab, ablation="full", similarity="dot", seed=0, layers=2, hidden=16, mq=5, ma=12, **kw):
    enc = EncoderConfig(len(vocab), layers=layers, hidden=hidden, heads=2, max_position=64, init_std=kw.pop("encoder_std", 0.02))
    cfg = Match2Config(enc, similarity=similarity, ablation=ablation, max_question=mq, max_answer=ma, **kw)
    return Match2(cfg, np.random.default_rng(seed))


def vocab_for(records):
    return build_vocab([t for r in records for t in (r.qu, r.qa, r.ans)])
