"""Classification metrics, lexical-overlap group analysis and heatmap export."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from .autograd import no_grad
from .errors import ContractError
from .model import Match2
from .retrieval import jaccard_counts
from .text import DatasetRecord, Vocabulary, encode_batch, tokenize


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    precision_undefined: bool = False
    recall_undefined: bool = False
    groups: List[dict] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def negative_recall(self) -> float:
        denom = self.tn + self.fp
        return self.tn / denom if denom else 0.0

    def to_json(self) -> dict:
        out = asdict(self)
        out["total"] = self.total
        out["negative_recall"] = self.negative_recall
        return out


def classification_metrics(predictions, labels) -> MetricsReport:
    """Positive class is "similar".  An undefined precision or recall is
    reported as 0 and flagged."""
    pred = np.asarray(predictions).astype(np.int64).ravel()
    gold = np.asarray(labels).astype(np.int64).ravel()
    if pred.shape != gold.shape:
        raise ContractError(f"{pred.size} predictions for {gold.size} labels")
    if not np.isin(gold, (0, 1)).all() or not np.isin(pred, (0, 1)).all():
        raise ContractError("predictions and labels must be binary")
    tp = int(((pred == 1) & (gold == 1)).sum())
    fp = int(((pred == 1) & (gold == 0)).sum())
    tn = int(((pred == 0) & (gold == 0)).sum())
    fn = int(((pred == 0) & (gold == 1)).sum())
    p_undef, r_undef = tp + fp == 0, tp + fn == 0
    precision = 0.0 if p_undef else tp / (tp + fp)
    recall = 0.0 if r_undef else tp / (tp + fn)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    acc = (tp + tn) / pred.size if pred.size else 0.0
    return MetricsReport(acc, precision, recall, f1, tp, fp, tn, fn, p_undef, r_undef)


# ---------------------------------------------------------------------------
# Jaccard groups


def jaccard_bucket(inter: int, union: int, buckets: int) -> int:
    """Bucket i holds Jaccard values in [i/buckets, (i+1)/buckets); 1 goes in the last bucket.

    Integer arithmetic, so boundary values land exactly.
    """
    if union == 0:
        return 0
    return min(inter * buckets // union, buckets - 1)


def group_analysis(records: Sequence[DatasetRecord], predictions, buckets: int = 20) -> List[dict]:
    """Per (bucket, label): record count, correct count and rate.

    Rows for every bucket and both labels, in bucket order.
    """
    if buckets < 1:
        raise ContractError(f"buckets must be >= 1, got {buckets}")
    pred = np.asarray(predictions).astype(np.int64).ravel()
    if pred.size != len(records):
        raise ContractError(f"{pred.size} predictions for {len(records)} records")
    total = np.zeros((buckets, 2), dtype=np.int64)
    correct = np.zeros((buckets, 2), dtype=np.int64)
    for rec, p in zip(records, pred):
        b = jaccard_bucket(*jaccard_counts(rec.user_question, rec.archived_question), buckets)
        total[b, rec.label] += 1
        correct[b, rec.label] += int(p == rec.label)
    rows = []
    for b in range(buckets):
        for label in (0, 1):
            n = int(total[b, label])
            rows.append({
                "bucket": b,
                "low": b / buckets,
                "high": (b + 1) / buckets,
                "label": label,
                "count": n,
                "correct": int(correct[b, label]),
                "rate": correct[b, label] / n if n else 0.0,
            })
    return rows


GROUP_COLUMNS = ("bucket", "low", "high", "label", "count", "correct", "rate")


def write_group_csv(rows: Sequence[dict], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=GROUP_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# heatmaps


@dataclass
class Heatmaps:
    user_tokens: List[str]
    archived_tokens: List[str]
    answer_tokens: List[str]
    pu: np.ndarray  # (m, w), averaged over layers
    pa: np.ndarray  # (n, w)
    ps: np.ndarray  # (L, m, n)

    @property
    def ps_mean(self) -> np.ndarray:
        return self.ps.mean(axis=0)


def compute_heatmaps(model: Match2, vocab: Vocabulary, record: DatasetRecord) -> Heatmaps:
    if not model.uses_answers:
        raise ContractError("the question-only model has no matching patterns to export")
    c = model.config
    with no_grad():
        out = model(encode_batch([record], vocab, c.max_question, c.max_answer), mode="infer")
    m = int(out.pu.question_mask[0].sum())
    n = int(out.pa.question_mask[0].sum())
    w = int(out.pu.answer_mask[0].sum())
    pu = out.pu.tensor.data[0].astype(np.float64)
    pa = out.pa.tensor.data[0].astype(np.float64)
    ps = out.ps.tensor.data[0].astype(np.float64)
    return Heatmaps(
        tokenize(record.user_question)[:m],
        tokenize(record.archived_question)[:n],
        tokenize(record.archived_answer)[:w],
        pu.mean(axis=0)[:m, :w],
        pa.mean(axis=0)[:n, :w],
        ps[:, :m, :n],
    )


def _matrix_csv(rows: Sequence[str], cols: Sequence[str], matrix: np.ndarray) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([""] + list(cols))
    for tok, values in zip(rows, matrix):
        writer.writerow([tok] + [repr(float(v)) for v in values])
    return buf.getvalue()


def read_matrix_csv(path: Union[str, Path]) -> Tuple[List[str], List[str], np.ndarray]:
    """Inverse of the heatmap writer: (row tokens, column tokens, values)."""
    with open(path, newline="", encoding="utf-8") as fh:
        table = list(csv.reader(fh))
    cols = table[0][1:]
    rows = [r[0] for r in table[1:]]
    values = np.array([[float(v) for v in r[1:]] for r in table[1:]], dtype=np.float64).reshape(len(rows), len(cols))
    return rows, cols, values


def export_heatmap(model: Match2, vocab: Vocabulary, record: DatasetRecord, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Write pu.csv, pa.csv, ps_layer<l>.csv and ps_mean.csv; returns the paths."""
    maps = compute_heatmaps(model, vocab, record)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "pu": (maps.user_tokens, maps.answer_tokens, maps.pu),
        "pa": (maps.archived_tokens, maps.answer_tokens, maps.pa),
        "ps_mean": (maps.user_tokens, maps.archived_tokens, maps.ps_mean),
    }
    for layer, grid in enumerate(maps.ps):
        files[f"ps_layer{layer}"] = (maps.user_tokens, maps.archived_tokens, grid)
    written = {}
    for name, (rows, cols, grid) in files.items():
        path = out / f"{name}.csv"
        path.write_text(_matrix_csv(rows, cols, grid), encoding="utf-8")
        written[name] = path
    return written
