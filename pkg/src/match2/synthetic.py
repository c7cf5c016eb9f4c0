"""Toy corpora with known structure, for overfit and behaviour checks.

Words are opaque tokens (``u17``, ``f3`` ...) so no route can lean on
meaning; every corpus is a deterministic function of its seed.
"""

from __future__ import annotations

from typing import List, Optional

import numpy as np

from .text import DatasetRecord


def _words(rng, prefix: str, vocab: int, k: int) -> List[str]:
    return [f"{prefix}{i}" for i in rng.choice(vocab, size=k, replace=False)]


def _answer(rng, content: List[str], filler_vocab: int, length: int) -> str:
    fill = [f"f{i}" for i in rng.integers(filler_vocab, size=max(0, length - len(content)))]
    toks = content + fill
    rng.shuffle(toks)
    return " ".join(toks)


def equality_corpus(n: int, seed: int = 0, vocab: int = 60, q_len: int = 4, a_len: int = 8) -> List[DatasetRecord]:
    """Label 1 iff the two questions are the same string."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        qu = _words(rng, "w", vocab, q_len)
        label = i % 2
        qa = list(qu) if label else _words(rng, "w", vocab, q_len)
        ans = _answer(rng, qa[:2], 30, a_len)
        out.append(DatasetRecord(" ".join(qu), " ".join(qa), ans, label, f"eq{i}"))
    return out


def bridge_corpus(n: int, seed: int = 0, vocab: int = 200, q_len: int = 3, a_len: int = 10,
                  filler_vocab: int = 40) -> List[DatasetRecord]:
    """Question pairs with no shared token; only the answer links them.

    The archived answer repeats the archived question's words, and also the
    user question's words exactly when the pair is similar.  Word pairings
    are drawn afresh for every record, so the questions alone carry no
    signal that transfers to unseen pairs.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        qu = _words(rng, "u", vocab, q_len)
        qa = _words(rng, "v", vocab, q_len)
        label = i % 2
        content = qa + (qu if label else _words(rng, "u", vocab, q_len))
        if not label:
            # decoy words must not collide with the user question
            content = qa + [w for w in content[q_len:] if w not in qu]
        out.append(DatasetRecord(" ".join(qu), " ".join(qa), _answer(rng, content, filler_vocab, a_len), label, f"br{i}"))
    return out


def overlap_corpus(n: int, seed: int = 0, vocab: int = 200, shared: int = 4, a_len: int = 10,
                   filler_vocab: int = 40, easy_negatives: float = 0.5, hard_only: bool = False) -> List[DatasetRecord]:
    """High-overlap pairs that differ in one key word each.

    Positive pairs have an answer mentioning both key words; hard negatives
    share just as many words but the answer never mentions the user
    question's key word.  A fraction ``easy_negatives`` of the negatives
    (unless ``hard_only``) are low-overlap pairs instead, which teaches a
    question-only model that overlap means similarity.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        label = i % 2
        base = _words(rng, "s", vocab, shared)
        ku, ka = _words(rng, "k", vocab, 2)
        easy = (not label) and (not hard_only) and rng.random() < easy_negatives
        if easy:
            qu = _words(rng, "s", vocab, shared) + [ku]
        else:
            qu = base + [ku]
        qa = base + [ka]
        content = [ka] + base[:2] + ([ku] if label else [])
        out.append(DatasetRecord(" ".join(qu), " ".join(qa), _answer(rng, content, filler_vocab, a_len), label, f"ov{i}"))
    return out


def answer_pool(records: List[DatasetRecord], extra: int = 0, seed: Optional[int] = None, filler_vocab: int = 40):
    """(id, text) pairs: every archived answer plus ``extra`` filler answers."""
    pool, seen = [], set()
    for r in records:
        if r.archived_answer not in seen:
            seen.add(r.archived_answer)
            pool.append((len(pool), r.archived_answer))
    rng = np.random.default_rng(seed)
    for _ in range(extra):
        pool.append((len(pool), _answer(rng, [], filler_vocab, 10)))
    return pool
