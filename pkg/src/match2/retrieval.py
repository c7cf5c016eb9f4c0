"""BM25 retrieval over an answer pool, plus the Jaccard index."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from .errors import AnswerLookupError, ConfigError, IngestionError
from .text import tokenize

AnswerId = Union[int, str]


def id_key(answer_id: AnswerId) -> tuple:
    """Sort key: integers numerically, then strings lexically."""
    if isinstance(answer_id, int) and not isinstance(answer_id, bool):
        return (0, answer_id, "")
    return (1, 0, str(answer_id))


@dataclass(frozen=True)
class ScoredCandidate:
    answer_id: AnswerId
    score: float


class InvertedIndex:
    def __init__(self, k1: float = 1.2, b: float = 0.75):
        self.k1, self.b = k1, b
        self.postings: Dict[str, List[Tuple[AnswerId, int]]] = {}
        self.doc_len: Dict[AnswerId, int] = {}
        self.texts: Dict[AnswerId, str] = {}
        self.avg_len = 0.0

    @property
    def doc_count(self) -> int:
        return len(self.doc_len)

    def doc_ids(self) -> List[AnswerId]:
        return list(self.doc_len)

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        n = self.doc_count
        return math.log((n - df + 0.5) / (df + 0.5) + 1.0)

    def term_weight(self, tf: int, length: int) -> float:
        k1, b = self.k1, self.b
        return tf * (k1 + 1) / (tf + k1 * (1 - b + b * length / self.avg_len))

    def scores(self, query: Union[str, Sequence[str]]) -> Dict[AnswerId, float]:
        """BM25 of every answer sharing at least one term with ``query``."""
        terms = tokenize(query) if isinstance(query, str) else list(query)
        acc: Dict[AnswerId, float] = {}
        for term in terms:
            plist = self.postings.get(term)
            if not plist:
                continue
            w = self.idf(term)
            for doc, tf in plist:
                acc[doc] = acc.get(doc, 0.0) + w * self.term_weight(tf, self.doc_len[doc])
        return acc

    def to_json(self) -> dict:
        return {
            "format_version": 1,
            "k1": self.k1,
            "b": self.b,
            "answers": [{"ans_id": d, "text": self.texts[d]} for d in self.doc_len],
        }

    def save(self, out_dir: Union[str, Path]) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "bm25_index.json"
        meta = self.to_json()
        meta["doc_count"] = self.doc_count
        meta["avg_len"] = self.avg_len
        meta["postings"] = {t: [[d, tf] for d, tf in p] for t, p in self.postings.items()}
        path.write_text(json.dumps(meta), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "InvertedIndex":
        path = Path(path)
        if path.is_dir():
            path = path / "bm25_index.json"
        meta = json.loads(path.read_text(encoding="utf-8"))
        pool = [(a["ans_id"], a["text"]) for a in meta["answers"]]
        return index_answers(pool, k1=meta["k1"], b=meta["b"])


def index_answers(pool: Iterable[Tuple[AnswerId, str]], k1: float = 1.2, b: float = 0.75) -> InvertedIndex:
    """Build the index; pool order only affects posting order, never scores."""
    index = InvertedIndex(k1, b)
    for answer_id, text in pool:
        if answer_id in index.doc_len:
            raise IngestionError(f"duplicate answer id {answer_id!r} in answer pool")
        tokens = tokenize(text)
        index.doc_len[answer_id] = len(tokens)
        index.texts[answer_id] = text
        for term, tf in Counter(tokens).items():
            index.postings.setdefault(term, []).append((answer_id, tf))
    if not index.doc_len:
        raise IngestionError("cannot index an empty answer pool")
    index.avg_len = sum(index.doc_len.values()) / len(index.doc_len)
    if index.avg_len == 0:
        raise IngestionError("answer pool contains no tokens")
    return index


def bm25_score(query: Union[str, Sequence[str]], answer_id: AnswerId, index: InvertedIndex,
               k1: Optional[float] = None, b: Optional[float] = None) -> float:
    if answer_id not in index.doc_len:
        raise AnswerLookupError(f"answer id {answer_id!r} is not indexed")
    k1 = index.k1 if k1 is None else k1
    b = index.b if b is None else b
    terms = tokenize(query) if isinstance(query, str) else list(query)
    length = index.doc_len[answer_id]
    score = 0.0
    for term in terms:
        tf = next((f for d, f in index.postings.get(term, ()) if d == answer_id), 0)
        if tf == 0:
            continue
        score += index.idf(term) * (tf * (k1 + 1) / (tf + k1 * (1 - b + b * length / index.avg_len)))
    return score


def top_k_candidates(question: Union[str, Sequence[str]], index: InvertedIndex, K: int = 5,
                     exclude: Union[AnswerId, Iterable[AnswerId], None] = None) -> List[ScoredCandidate]:
    """The K best-scoring answers matching ``question``, ties by ascending id."""
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    if exclude is None:
        skip = set()
    elif isinstance(exclude, (str, int)):
        skip = {exclude}
    else:
        skip = set(exclude)
    scored = [(s, d) for d, s in index.scores(question).items() if d not in skip]
    scored.sort(key=lambda sd: (-sd[0], id_key(sd[1])))
    return [ScoredCandidate(d, s) for s, d in scored[:K]]


def jaccard_counts(a: str, b: str) -> Tuple[int, int]:
    ta, tb = set(tokenize(a)), set(tokenize(b))
    return len(ta & tb), len(ta | tb)


def jaccard_index(a: str, b: str) -> float:
    inter, union = jaccard_counts(a, b)
    return inter / union if union else 0.0
