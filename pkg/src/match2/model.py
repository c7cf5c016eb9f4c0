"""The matching-over-matching model and its ablations.

Three similarity routes feed the question-pair score:

* representation route: the pooled feature of a (Q^u, Q^a) encoding, ``v_q``;
* pattern route: token interaction matrices of (Q^u, A) and (Q^a, A),
  compared row-by-row over the shared answer axis, compressed to ``v_a``;
* a GRU-style gate that keeps ``v_q`` primary and blends in ``v_a``.

Tensor layout is batch-first: a matching pattern is (B, L, q_len, a_len) and
a pattern similarity tensor is (B, L, m, n).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import ops
from .autograd import Tensor
from .encoder import EncoderConfig, EncoderOutput, StackedEncoder, split_segments
from .errors import ConfigError, ContractError
from .nn import BatchNorm2d, Conv3x3, MLPHead, Module, normal
from .ops import SIMILARITY_FUNCTIONS
from .text import Batch

ABLATIONS = ("full", "Q-only", "A-only")
_ABLATION_ALIASES = {"full": "full", "q-only": "Q-only", "q": "Q-only", "a-only": "A-only", "a": "A-only"}


def canonical_ablation(name: str) -> str:
    try:
        return _ABLATION_ALIASES[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown ablation {name!r}; expected one of {ABLATIONS}") from None


@dataclass
class Match2Config:
    encoder: EncoderConfig
    similarity: str = "dot"
    ablation: str = "full"
    mlp_hidden: Optional[int] = None
    init_std: float = 0.2
    max_question: int = 24
    max_answer: int = 256
    share_aux: bool = True

    def __post_init__(self):
        self.ablation = canonical_ablation(self.ablation)
        if self.similarity not in SIMILARITY_FUNCTIONS:
            raise ConfigError(f"unknown similarity {self.similarity!r}; expected one of {SIMILARITY_FUNCTIONS}")
        if self.mlp_hidden is None:
            self.mlp_hidden = self.encoder.hidden
        needed = 2 * self.max_question + 3
        if self.ablation != "Q-only":
            needed = max(needed, self.max_question + self.max_answer + 3)
        if needed > self.encoder.max_position:
            raise ConfigError(f"encoded length {needed} exceeds max_position {self.encoder.max_position}")


@dataclass
class MatchingPattern:
    tensor: Tensor
    question_mask: np.ndarray
    answer_mask: np.ndarray


@dataclass
class PatternSimilarityTensor:
    tensor: Tensor
    mask: np.ndarray


# ---------------------------------------------------------------------------
# representation route


def question_pair_similarity(qq: EncoderOutput) -> Tensor:
    """``v_q`` is the pooled feature of the (Q^u, Q^a) encoding, untransformed."""
    return qq.pooled


# ---------------------------------------------------------------------------
# pattern route


def matching_pattern(questions: List[Tensor], answers: List[Tensor], q_mask: np.ndarray, a_mask: np.ndarray) -> MatchingPattern:
    if len(questions) != len(answers):
        raise ContractError(f"layer count mismatch: {len(questions)} question vs {len(answers)} answer features")
    q_mask = np.asarray(q_mask, dtype=bool)
    a_mask = np.asarray(a_mask, dtype=bool)
    dtype = questions[0].dtype
    cell = (q_mask[:, :, None] & a_mask[:, None, :]).astype(dtype)
    layers = [ops.matmul(q, ops.transpose(a, (0, 2, 1))) * cell for q, a in zip(questions, answers)]
    return MatchingPattern(ops.stack(layers, axis=1), q_mask, a_mask)


def pattern_similarity(pu: MatchingPattern, pa: MatchingPattern, fn: str = "dot") -> PatternSimilarityTensor:
    """Compare each user-question row of ``pu`` with each archived-question row of ``pa``."""
    if pu.tensor.shape[1] != pa.tensor.shape[1]:
        raise ContractError(f"patterns disagree on layer count: {pu.tensor.shape} vs {pa.tensor.shape}")
    if pu.tensor.shape[-1] != pa.tensor.shape[-1]:
        raise ContractError(f"patterns disagree on answer length: {pu.tensor.shape} vs {pa.tensor.shape}")
    answer_mask = pu.answer_mask & pa.answer_mask
    joint = pu.question_mask[:, :, None] & pa.question_mask[:, None, :]
    raw = ops.pairwise_similarity(pu.tensor, pa.tensor, fn, mask=answer_mask[:, None, :])
    return PatternSimilarityTensor(raw * joint[:, None].astype(raw.dtype), joint)


class PatternCompressor(Module):
    """Two BN-ReLU-Conv blocks (L -> H -> H channels) and masked mean pooling."""

    def __init__(self, layers: int, hidden: int, rng: np.random.Generator, std: float):
        self.bn1 = BatchNorm2d(layers)
        self.conv1 = Conv3x3(layers, hidden, rng, std)
        self.bn2 = BatchNorm2d(hidden)
        self.conv2 = Conv3x3(hidden, hidden, rng, std)


def compress(ps: PatternSimilarityTensor, params: PatternCompressor, mode: str = "infer") -> Tensor:
    valid = ps.mask[:, None].astype(ps.tensor.dtype)
    h = ops.relu(params.bn1(ps.tensor, mode)) * valid
    h = params.conv1(h)
    h = ops.relu(params.bn2(h, mode)) * valid
    h = params.conv2(h)
    return ops.global_avg_pool(h, ps.mask)


# ---------------------------------------------------------------------------
# aggregation


class Gate(Module):
    def __init__(self, hidden: int, rng: np.random.Generator, std: float):
        shape = (hidden, hidden)
        self.W_r, self.W_z, self.W = (normal(rng, shape, std) for _ in range(3))
        self.U_r, self.U_z, self.U = (normal(rng, shape, std) for _ in range(3))


def gate_fuse(v_q: Tensor, v_a: Tensor, params: Gate, z_override=None, candidate_override=None) -> Tensor:
    """GRU-style blend ``z * v_q + (1 - z) * tanh(W v_a + U (r * v_q))``.

    The two overrides replace ``z`` or the tanh candidate with fixed arrays;
    they exist for tests of the blend itself.
    """
    if v_q.shape != v_a.shape or v_q.shape[-1] != params.W.shape[0]:
        raise ContractError(f"gate inputs {v_q.shape} and {v_a.shape} do not match hidden size {params.W.shape[0]}")
    lin = ops.linear
    r = ops.sigmoid(lin(v_a, params.W_r) + lin(v_q, params.U_r))
    z = ops.sigmoid(lin(v_a, params.W_z) + lin(v_q, params.U_z))
    if z_override is not None:
        z = ops.cast(Tensor(np.broadcast_to(z_override, v_q.shape)), v_q.dtype)
    cand = ops.tanh(lin(v_a, params.W) + lin(r * v_q, params.U))
    if candidate_override is not None:
        cand = ops.cast(Tensor(np.broadcast_to(candidate_override, v_q.shape)), v_q.dtype)
    return z * v_q + (1.0 - z) * cand


def output_head(v: Tensor, params: MLPHead, mode: str = "infer", keep_rate: float = 1.0, rng=None) -> Tensor:
    return params(v, mode, keep_rate, rng)


def aux_head(pooled: Tensor, params: MLPHead, mode: str = "infer", keep_rate: float = 1.0, rng=None) -> Tensor:
    """Question-answer match probability from a QA encoding's pooled feature."""
    return params(pooled, mode, keep_rate, rng)


# ---------------------------------------------------------------------------
# full model


@dataclass
class ModelOutput:
    y_q: Tensor
    y_u: Optional[Tensor] = None
    y_a: Optional[Tensor] = None
    v_q: Optional[Tensor] = None
    v_a: Optional[Tensor] = None
    v: Optional[Tensor] = None
    pu: Optional[MatchingPattern] = None
    pa: Optional[MatchingPattern] = None
    ps: Optional[PatternSimilarityTensor] = None
    encodings: dict = field(default_factory=dict)


class Match2(Module):
    """Parameters are created for the routes the ablation keeps and no others.

    ``qq_encoder`` encodes (Q^u, Q^a); ``qa_encoder`` is one encoder shared by
    both (question, answer) pairs; ``aux`` is one head serving both auxiliary
    predictions unless ``share_aux`` is off, in which case ``aux_a`` scores
    the (Q^a, A) pair.
    """

    def __init__(self, cfg: Match2Config, rng: np.random.Generator):
        self._cfg = cfg
        enc, h, std = cfg.encoder, cfg.encoder.hidden, cfg.init_std
        uses_q = cfg.ablation != "A-only"
        uses_a = cfg.ablation != "Q-only"
        self.qq_encoder = StackedEncoder(enc, rng) if uses_q else None
        self.qa_encoder = StackedEncoder(enc, rng) if uses_a else None
        self.compressor = PatternCompressor(enc.layers, h, rng, std) if uses_a else None
        self.aux = MLPHead(h, cfg.mlp_hidden, rng, std) if uses_a else None
        self.aux_a = MLPHead(h, cfg.mlp_hidden, rng, std) if uses_a and not cfg.share_aux else None
        self.gate = Gate(h, rng, std) if cfg.ablation == "full" else None
        self.head = MLPHead(h, cfg.mlp_hidden, rng, std)

    @property
    def config(self) -> Match2Config:
        return self._cfg

    @property
    def uses_answers(self) -> bool:
        return self._cfg.ablation != "Q-only"

    def __call__(self, batch: Batch, mode: str = "infer", keep_rate: float = 1.0, rng=None) -> ModelOutput:
        return self.forward(batch, mode, keep_rate, rng)

    def forward(self, batch: Batch, mode: str = "infer", keep_rate: float = 1.0, rng=None) -> ModelOutput:
        cfg = self._cfg
        out = ModelOutput(y_q=None)  # type: ignore[arg-type]
        if self.qq_encoder is not None:
            qq = self.qq_encoder(batch.qq, mode, keep_rate, rng)
            out.encodings["qq"] = qq
            out.v_q = question_pair_similarity(qq)
        if self.qa_encoder is not None:
            ua = self.qa_encoder(batch.ua, mode, keep_rate, rng)
            aa = self.qa_encoder(batch.aa, mode, keep_rate, rng)
            out.encodings["ua"], out.encodings["aa"] = ua, aa
            out.pu = matching_pattern(*split_segments(ua))
            out.pa = matching_pattern(*split_segments(aa))
            out.ps = pattern_similarity(out.pu, out.pa, cfg.similarity)
            out.v_a = compress(out.ps, self.compressor, mode)
            out.y_u = aux_head(ua.pooled, self.aux, mode, keep_rate, rng)
            out.y_a = aux_head(aa.pooled, self.aux_a or self.aux, mode, keep_rate, rng)
        if cfg.ablation == "full":
            out.v = gate_fuse(out.v_q, out.v_a, self.gate)
        elif cfg.ablation == "Q-only":
            out.v = out.v_q
        else:
            out.v = out.v_a
        out.y_q = output_head(out.v, self.head, mode, keep_rate, rng)
        return out


def ablation_model(cfg: Match2Config, ablation: Optional[str] = None, seed: int = 0) -> Match2:
    """Build the wiring for ``full``, ``Q-only`` or ``A-only``."""
    if ablation is not None:
        cfg = Match2Config(**{**cfg.__dict__, "ablation": ablation})
    return Match2(cfg, np.random.default_rng(seed))
