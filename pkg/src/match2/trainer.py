"""Multi-task training: auxiliary labels, negative answers, RAdam, schedule."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .autograd import Tensor, backward, no_grad
from .config import TrainingConfig
from .errors import NumericalError, SamplingUnavailable
from .model import Match2, ModelOutput
from .nn import Parameter
from .retrieval import InvertedIndex, id_key, index_answers, top_k_candidates
from .text import DatasetRecord, Vocabulary, make_batches

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# instances and labels


@dataclass
class TrainingInstance:
    record: DatasetRecord
    answer: str
    y_q: int
    y_u: int
    y_a: int
    r_eff: float

    @property
    def qu(self) -> str:
        return self.record.user_question

    @property
    def qa(self) -> str:
        return self.record.archived_question

    @property
    def ans(self) -> str:
        return self.answer

    @property
    def label(self) -> int:
        return self.y_q


def build_aux_labels(record: DatasetRecord, is_true_archived: bool, r: float) -> Tuple[int, int, float]:
    """(y_u, y_a, r_eff) for pairing ``record`` with an answer.

    The true archived answer is relevant to the archived question, and to the
    user question exactly when the two questions are similar.  A sampled
    negative is relevant to neither, so it cannot bridge them and the main
    task is switched off for that instance.
    """
    if is_true_archived:
        return int(record.label == 1), 1, r
    return 0, 0, 0.0


def make_instance(record: DatasetRecord, answer: Optional[str], r: float) -> TrainingInstance:
    is_true = answer is None
    y_u, y_a, r_eff = build_aux_labels(record, is_true, r)
    return TrainingInstance(record, record.archived_answer if is_true else answer, record.label, y_u, y_a, r_eff)


class NegativeSampler:
    """Draws irrelevant answers from BM25 top-K candidates."""

    def __init__(self, index: InvertedIndex, K: int = 5, retrieve_from: str = "archived"):
        self.index, self.K, self.retrieve_from = index, K, retrieve_from
        self._by_text: Dict[str, List] = {}
        for answer_id, text in index.texts.items():
            self._by_text.setdefault(text, []).append(answer_id)

    @classmethod
    def from_records(cls, records: Sequence[DatasetRecord], K: int = 5, pool=None, retrieve_from: str = "archived"):
        if pool is None:
            seen: Dict[str, int] = {}
            for r in records:
                seen.setdefault(r.archived_answer, len(seen))
            pool = [(i, text) for text, i in seen.items()]
        return cls(index_answers(pool), K, retrieve_from)

    def true_ids(self, record: DatasetRecord) -> List:
        return self._by_text.get(record.archived_answer, [])

    def candidates(self, record: DatasetRecord) -> List:
        exclude = self.true_ids(record)
        found = {c.answer_id for c in top_k_candidates(record.archived_question, self.index, self.K, exclude)}
        if self.retrieve_from == "both":
            found |= {c.answer_id for c in top_k_candidates(record.user_question, self.index, self.K, exclude)}
        return sorted(found, key=id_key)

    def sample(self, record: DatasetRecord, rng: np.random.Generator) -> str:
        return sample_negative_answer(record, self, rng)


def sample_negative_answer(record: DatasetRecord, sampler: NegativeSampler, rng: np.random.Generator) -> str:
    """Uniform draw from the record's top-K list, else from the wider pool.

    Raises :class:`SamplingUnavailable` when the pool holds nothing but the
    true answer.
    """
    ids = sampler.candidates(record)
    if not ids:
        true = set(sampler.true_ids(record))
        ids = sorted((d for d in sampler.index.doc_ids() if d not in true and sampler.index.texts[d] != record.archived_answer), key=id_key)
    if not ids:
        raise SamplingUnavailable(f"no negative answer available for record {record.record_id!r}")
    return sampler.index.texts[ids[int(rng.integers(len(ids)))]]


# ---------------------------------------------------------------------------
# loss


def combine_losses(loss_q, loss_u, loss_a, r):
    """``r * loss_q + (1 - r) / 2 * (loss_u + loss_a)``; works on floats or tensors."""
    return r * loss_q + (1 - r) * 0.5 * loss_u + (1 - r) * 0.5 * loss_a


def instance_loss(y_q: Tensor, y_u: Optional[Tensor], y_a: Optional[Tensor], labels_q, labels_u, labels_a, r_eff) -> Tensor:
    """Per-instance weighted cross-entropy (vector over the batch).

    Without auxiliary predictions (question-only wiring) the loss is the
    main-task cross-entropy alone.
    """
    loss_q = ops.binary_cross_entropy(y_q, labels_q)
    if y_u is None:
        return loss_q
    r = np.asarray(r_eff, dtype=y_q.dtype)
    loss_u = ops.binary_cross_entropy(y_u, labels_u)
    loss_a = ops.binary_cross_entropy(y_a, labels_a)
    return loss_q * r + (loss_u + loss_a) * ((1.0 - r) * 0.5)


def batch_loss(out: ModelOutput, batch) -> Tensor:
    per = instance_loss(out.y_q, out.y_u, out.y_a, batch.labels, batch.y_u, batch.y_a, batch.ratio)
    return ops.mean(per)


# ---------------------------------------------------------------------------
# optimiser and schedule


def radam_rho(step: int, beta2: float) -> Tuple[float, float]:
    """(rho_inf, rho_t) of the rectified Adam variance schedule."""
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    b2t = beta2**step
    return rho_inf, rho_inf - 2.0 * step * b2t / (1.0 - b2t)


class RAdam:
    """Rectified Adam.  While the variance estimate is untrustworthy
    (rho_t <= 4) the update is bias-corrected momentum only."""

    def __init__(self, params: Dict[str, Parameter], lr: float = 5e-5, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-6):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    @classmethod
    def from_config(cls, params, cfg: TrainingConfig) -> "RAdam":
        return cls(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)

    def step(self) -> bool:
        """Apply one update from ``.grad``; returns True on a rectified step."""
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericalError(f"non-finite gradient in parameter {name!r} at step {self.step_count + 1}")
        self.step_count += 1
        t, b1, b2 = self.step_count, self.beta1, self.beta2
        rho_inf, rho_t = radam_rho(t, b2)
        rectified = rho_t > 4.0
        if rectified:
            rect = math.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = m / (1 - b1**t)
            if rectified:
                v_hat = np.sqrt(v / (1 - b2**t))
                update = self.lr * rect * m_hat / (v_hat + self.eps)
            else:
                update = self.lr * m_hat
            p.data = (p.data - update).astype(p.dtype)
        return rectified

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"{k}.m"] = self.m[k]
            out[f"{k}.v"] = self.v[k]
        return out


def keep_rate(step: int, initial: float = 1.0, decay: float = 0.933, every: int = 5000, floor: float = 0.5) -> float:
    """Exponentially decayed dropout keep rate, never below ``floor``."""
    return max(initial * decay ** (step / every), floor)


# ---------------------------------------------------------------------------
# loop


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    accuracy: float
    instances: int
    steps: int
    losses: List[float] = field(default_factory=list)


class Trainer:
    """Owns the optimiser, step counter and RNG stream for one model."""

    def __init__(self, model: Match2, vocab: Vocabulary, cfg: TrainingConfig, sampler: Optional[NegativeSampler] = None):
        self.model, self.vocab, self.cfg, self.sampler = model, vocab, cfg, sampler
        self.optimizer = RAdam.from_config(model.named_parameters(), cfg)
        self.rng = np.random.default_rng(cfg.seed)
        self.global_step = 0
        self.epoch = 0
        self.history: List[EpochMetrics] = []

    @property
    def limits(self) -> Tuple[int, int]:
        c = self.model.config
        return c.max_question, c.max_answer

    def build_instances(self, records: Sequence[DatasetRecord]) -> List[TrainingInstance]:
        r = self.cfg.loss_ratio if self.model.uses_answers else 1.0
        out = []
        for rec in records:
            out.append(make_instance(rec, None, r))
            if self.model.uses_answers and self.sampler is not None and self.cfg.p_neg > 0:
                if self.rng.random() < self.cfg.p_neg:
                    try:
                        out.append(make_instance(rec, self.sampler.sample(rec, self.rng), r))
                    except SamplingUnavailable:
                        logger.debug("no negative for %s", rec.record_id)
        return out

    def train_step(self, batch) -> float:
        kr = keep_rate(self.global_step, self.cfg.keep_initial, self.cfg.keep_decay, self.cfg.keep_every, self.cfg.keep_floor)
        self.model.zero_grad()
        out = self.model(batch, mode="train", keep_rate=kr, rng=self.rng)
        loss = batch_loss(out, batch)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss at step {self.global_step} (batch {self.global_step})")
        backward(loss)
        self.optimizer.step()
        self.global_step += 1
        self._last_pred = out.y_q.data
        return value

    def train_epoch(self, records: Sequence[DatasetRecord]) -> EpochMetrics:
        instances = self.build_instances(records)
        mq, ma = self.limits
        losses, correct, total = [], 0, 0
        for batch in make_batches(instances, self.cfg.batch_size, self.vocab, mq, ma, shuffle=True, rng=self.rng):
            try:
                losses.append(self.train_step(batch))
            except NumericalError as exc:
                raise NumericalError(f"{exc}; epoch {self.epoch}, batch {len(losses)}") from None
            correct += int(((self._last_pred >= 0.5).astype(int) == batch.labels).sum())
            total += len(batch)
        self.epoch += 1
        metrics = EpochMetrics(self.epoch, float(np.mean(losses)) if losses else 0.0, correct / max(total, 1), len(instances), len(losses), losses)
        self.history.append(metrics)
        return metrics

    def fit(self, train: Sequence[DatasetRecord], epochs: Optional[int] = None, dev: Optional[Sequence[DatasetRecord]] = None,
            target_accuracy: Optional[float] = None, eval_on=None, callback=None) -> List[EpochMetrics]:
        """Train for ``epochs``; stop early once infer-mode accuracy on
        ``eval_on`` (default ``train``) reaches ``target_accuracy``."""
        epochs = self.cfg.epochs if epochs is None else epochs
        for _ in range(epochs):
            m = self.train_epoch(train)
            if callback is not None:
                callback(self, m)
            if target_accuracy is not None:
                acc = accuracy(self.model, self.vocab, eval_on if eval_on is not None else train)
                if acc >= target_accuracy:
                    break
        return self.history


# ---------------------------------------------------------------------------
# inference


def predict_proba(model: Match2, vocab: Vocabulary, records: Sequence, batch_size: int = 64) -> np.ndarray:
    c = model.config
    probs = []
    with no_grad():
        for batch in make_batches(list(records), batch_size, vocab, c.max_question, c.max_answer):
            probs.append(model(batch, mode="infer").y_q.data.astype(np.float64))
    return np.concatenate(probs) if probs else np.zeros(0)


def threshold(prob) -> np.ndarray:
    """Label 1 iff the probability is at least 0.5 (a tie counts as similar)."""
    return (np.asarray(prob) >= 0.5).astype(np.int64)


def accuracy(model: Match2, vocab: Vocabulary, records: Sequence) -> float:
    labels = np.array([r.label for r in records])
    return float((threshold(predict_proba(model, vocab, records)) == labels).mean())


def predict(qu: str, qa: str, ans: str, model: Match2, vocab: Vocabulary) -> Tuple[float, int]:
    rec = DatasetRecord(qu, qa, ans, 0)
    p = float(predict_proba(model, vocab, [rec])[0])
    return p, int(threshold(p))
