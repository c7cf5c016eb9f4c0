"""Tokenisation, vocabulary, dataset ingestion and batch assembly."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, IngestionError

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
RESERVED = (PAD, UNK, CLS, SEP)
PAD_ID, UNK_ID, CLS_ID, SEP_ID = 0, 1, 2, 3

_TOKEN_RE = re.compile(r"\w+")

# question / answer truncation used for the two benchmark corpora
LIMITS = {
    "cqadupstack": {"max_question": 24, "max_answer": 256},
    "quoraqp-a": {"max_question": 32, "max_answer": 100},
}


@lru_cache(maxsize=65536)
def _tokenize_cached(text: str) -> tuple:
    return tuple(_TOKEN_RE.findall(text.lower()))


def tokenize(text: str) -> List[str]:
    """Lowercase and split on whitespace and punctuation."""
    return list(_tokenize_cached(text))


def normalize(text: str) -> str:
    return " ".join(text.split())


class Vocabulary:
    def __init__(self, tokens: Sequence[str], min_freq: int = 1):
        self.id_to_token: List[str] = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        self.min_freq = min_freq

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def ids(self, tokens: Iterable[str]) -> List[int]:
        return [self.token_to_id.get(t, UNK_ID) for t in tokens]

    def encode(self, text: str) -> List[int]:
        return self.ids(tokenize(text))

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> List[str]:
        out = []
        for i in ids:
            tok = self.id_to_token[int(i)]
            if skip_special and int(i) in (PAD_ID, CLS_ID, SEP_ID):
                continue
            out.append(tok)
        return out

    def to_json(self) -> dict:
        return {"tokens": self.id_to_token[len(RESERVED):], "min_freq": self.min_freq}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(obj["tokens"], obj.get("min_freq", 1))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocab(corpus: Iterable[str], min_freq: int = 1) -> Vocabulary:
    """Ids assigned by descending count, then token; rare tokens fall to [UNK]."""
    if min_freq < 1:
        raise ConfigError(f"min_freq must be >= 1, got {min_freq}")
    counts: Counter = Counter()
    seen = False
    for text in corpus:
        seen = True
        counts.update(tokenize(text))
    if not seen:
        raise IngestionError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_freq and t not in RESERVED), key=lambda t: (-counts[t], t))
    return Vocabulary(kept, min_freq)


@dataclass
class TokenSequence:
    """``[CLS] first [SEP] second [SEP]`` right-padded to a fixed length."""

    ids: np.ndarray
    mask: np.ndarray
    segments: np.ndarray
    first_len: int
    second_len: int
    max_first: int
    max_second: int

    def __len__(self) -> int:
        return len(self.ids)


def encode_pair(first: str, second: str, max_first: int, max_second: int, vocab: Vocabulary) -> TokenSequence:
    if max_first < 1 or max_second < 1:
        raise ConfigError("segment limits must be positive")
    a = vocab.encode(first)[:max_first]
    b = vocab.encode(second)[:max_second]
    total = max_first + max_second + 3
    ids = np.full(total, PAD_ID, dtype=np.int64)
    seg = np.zeros(total, dtype=np.int64)
    mask = np.zeros(total, dtype=np.int64)
    body = [CLS_ID] + a + [SEP_ID] + b + [SEP_ID]
    ids[: len(body)] = body
    mask[: len(body)] = 1
    seg[len(a) + 2 : len(body)] = 1
    return TokenSequence(ids, mask, seg, len(a), len(b), max_first, max_second)


@dataclass
class DatasetRecord:
    user_question: str
    archived_question: str
    archived_answer: str
    label: int
    record_id: str = ""

    # uniform accessors shared with training instances
    @property
    def qu(self) -> str:
        return self.user_question

    @property
    def qa(self) -> str:
        return self.archived_question

    @property
    def ans(self) -> str:
        return self.archived_answer


_REQUIRED = ("qu", "qa", "ans", "label")


def parse_record(obj: dict, fallback_id: str) -> DatasetRecord:
    if not isinstance(obj, dict):
        raise IngestionError("record is not a JSON object")
    for name in _REQUIRED:
        if name not in obj:
            raise IngestionError(f"missing required field '{name}'")
    label = obj["label"]
    if isinstance(label, bool) or label not in (0, 1):
        raise IngestionError(f"field 'label' must be 0 or 1, got {label!r}")
    texts = {}
    for name in ("qu", "qa", "ans"):
        value = obj[name]
        if not isinstance(value, str):
            raise IngestionError(f"field '{name}' must be a string")
        value = normalize(value)
        if not tokenize(value):
            raise IngestionError(f"field '{name}' is empty after normalization")
        texts[name] = value
    rid = obj.get("id", fallback_id)
    return DatasetRecord(texts["qu"], texts["qa"], texts["ans"], int(label), str(rid))


def _resolve(path: Union[str, Path], split: Optional[str]) -> Path:
    path = Path(path)
    if path.is_dir():
        if split is None:
            raise IngestionError(f"{path} is a directory; a split name is required")
        path = path / f"{split}.jsonl"
    if not path.exists():
        raise IngestionError(f"dataset file not found: {path}")
    return path


def load_dataset(path: Union[str, Path], split: Optional[str] = None, strict: bool = True) -> List[DatasetRecord]:
    """Read a JSON Lines dataset (``path`` or ``path/<split>.jsonl``).

    Malformed lines raise :class:`IngestionError` naming the line, or with
    ``strict=False`` are logged and skipped.
    """
    path = _resolve(path, split)
    records: List[DatasetRecord] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append(parse_record(obj, fallback_id=f"{path.stem}-{lineno}"))
            except (json.JSONDecodeError, IngestionError) as exc:
                msg = f"{path}:{lineno}: {exc}"
                if strict:
                    raise IngestionError(msg) from None
                logger.warning("rejected %s", msg)
    return records


def load_answer_pool(path: Union[str, Path]) -> List[tuple]:
    """Read ``{"ans_id": ..., "text": ...}`` lines into (id, text) pairs."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"answer pool not found: {path}")
    pool = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestionError(f"{path}:{lineno}: {exc}") from None
            for name in ("ans_id", "text"):
                if name not in obj:
                    raise IngestionError(f"{path}:{lineno}: missing required field '{name}'")
            pool.append((obj["ans_id"], normalize(str(obj["text"]))))
    return pool


@dataclass
class EncodedBatch:
    ids: np.ndarray
    mask: np.ndarray
    segments: np.ndarray
    first_len: np.ndarray
    second_len: np.ndarray
    max_first: int
    max_second: int

    @property
    def shape(self) -> tuple:
        return self.ids.shape

    @classmethod
    def stack(cls, seqs: Sequence[TokenSequence]) -> "EncodedBatch":
        return cls(
            np.stack([s.ids for s in seqs]),
            np.stack([s.mask for s in seqs]),
            np.stack([s.segments for s in seqs]),
            np.array([s.first_len for s in seqs]),
            np.array([s.second_len for s in seqs]),
            seqs[0].max_first,
            seqs[0].max_second,
        )


@dataclass
class Batch:
    """Three encodings per item plus labels.

    ``qq`` is (Q^u, Q^a), ``ua`` is (Q^u, answer), ``aa`` is (Q^a, answer).
    Auxiliary labels and the per-item loss ratio are filled for training
    instances and default to the true-answer convention otherwise.
    """

    qq: EncodedBatch
    ua: EncodedBatch
    aa: EncodedBatch
    labels: np.ndarray
    y_u: np.ndarray
    y_a: np.ndarray
    ratio: np.ndarray
    items: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)


def encode_batch(items: Sequence, vocab: Vocabulary, max_question: int, max_answer: int, ratio: float = 1.0) -> Batch:
    qq = [encode_pair(it.qu, it.qa, max_question, max_question, vocab) for it in items]
    ua = [encode_pair(it.qu, it.ans, max_question, max_answer, vocab) for it in items]
    aa = [encode_pair(it.qa, it.ans, max_question, max_answer, vocab) for it in items]
    labels = np.array([it.label for it in items], dtype=np.int64)
    y_u = np.array([getattr(it, "y_u", it.label) for it in items], dtype=np.int64)
    y_a = np.array([getattr(it, "y_a", 1) for it in items], dtype=np.int64)
    r = np.array([getattr(it, "r_eff", ratio) for it in items], dtype=np.float64)
    return Batch(EncodedBatch.stack(qq), EncodedBatch.stack(ua), EncodedBatch.stack(aa), labels, y_u, y_a, r, list(items))


def make_batches(
    items: Sequence,
    batch_size: int,
    vocab: Vocabulary,
    max_question: int,
    max_answer: int,
    shuffle: bool = False,
    rng: Optional[np.random.Generator] = None,
    ratio: float = 1.0,
) -> Iterator[Batch]:
    """Yield batches in order (or a seeded permutation); the last may be short."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(items))
    if shuffle:
        if rng is None:
            raise ConfigError("shuffling needs an explicit rng")
        order = rng.permutation(len(items))
    for start in range(0, len(items), batch_size):
        chunk = [items[i] for i in order[start : start + batch_size]]
        yield encode_batch(chunk, vocab, max_question, max_answer, ratio)
