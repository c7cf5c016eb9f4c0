"""Stacked pre-norm transformer encoder for formatted text pairs.

Given ``[CLS] first [SEP] second [SEP]`` token ids it returns the pooled
[CLS] feature (tanh projection after a final layer norm) and the residual
stream after every layer.

Parameter count for vocabulary V, hidden H, feed-forward F, L layers and
P positions::

    (V + P + 2) * H                      embeddings (token, position, segment)
    + L * (4 * (H*H + H) + 4*H           attention projections, two layer norms
           + 2 * H*F + F + H)            feed-forward
    + 2*H + H*H + H                      final layer norm, pooler
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import ops
from .autograd import Tensor
from .errors import ConfigError, ContractError
from .nn import Embedding, LayerNorm, Linear, Module
from .text import EncodedBatch, TokenSequence


@dataclass
class EncoderConfig:
    vocab_size: int
    layers: int = 4
    hidden: int = 64
    heads: int = 4
    ffn: Optional[int] = None
    max_position: int = 300
    init_std: float = 0.02

    def __post_init__(self):
        if self.ffn is None:
            self.ffn = 4 * self.hidden
        if self.layers < 1:
            raise ConfigError(f"encoder needs at least one layer, got {self.layers}")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden size {self.hidden} is not divisible by {self.heads} heads")
        if self.vocab_size < 4:
            raise ConfigError("vocabulary must at least hold the reserved tokens")


def parameter_count(cfg: EncoderConfig) -> int:
    h, f, n = cfg.hidden, cfg.ffn, cfg.layers
    per_layer = 4 * (h * h + h) + 4 * h + 2 * h * f + f + h
    return (cfg.vocab_size + cfg.max_position + 2) * h + n * per_layer + 2 * h + h * h + h


@dataclass
class EncoderOutput:
    pooled: Tensor
    sequence: List[Tensor]
    mask: np.ndarray
    first_len: Optional[np.ndarray] = None
    second_len: Optional[np.ndarray] = None
    max_first: Optional[int] = None
    max_second: Optional[int] = None
    attention: List[np.ndarray] = field(default_factory=list)


class MultiHeadAttention(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        h, std = cfg.hidden, cfg.init_std
        self.query = Linear(h, h, rng, std)
        self.key = Linear(h, h, rng, std)
        self.value = Linear(h, h, rng, std)
        self.out = Linear(h, h, rng, std)
        self._heads = cfg.heads

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tuple[Tensor, np.ndarray]:
        return multi_head_attention(x, mask, self)


def multi_head_attention(x: Tensor, mask: np.ndarray, params: MultiHeadAttention) -> Tuple[Tensor, np.ndarray]:
    """Scaled dot-product self-attention; keys with ``mask == 0`` get weight 0.

    Returns the projected output and the (B, heads, T, T) attention weights.
    """
    bsz, length, hidden = x.shape
    heads = params._heads
    d = hidden // heads

    def split(t: Tensor) -> Tensor:
        return ops.transpose(ops.reshape(t, (bsz, length, heads, d)), (0, 2, 1, 3))

    q, k, v = split(params.query(x)), split(params.key(x)), split(params.value(x))
    scores = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(d))
    keep = np.asarray(mask, dtype=bool)[:, None, None, :]
    weights = ops.softmax(scores, axis=-1, mask=keep)
    ctx = ops.matmul(weights, v)
    ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (bsz, length, hidden))
    return params.out(ctx), weights.data


class TransformerLayer(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.attn_norm = LayerNorm(cfg.hidden)
        self.attn = MultiHeadAttention(cfg, rng)
        self.ffn_norm = LayerNorm(cfg.hidden)
        self.ffn_in = Linear(cfg.hidden, cfg.ffn, rng, cfg.init_std)
        self.ffn_out = Linear(cfg.ffn, cfg.hidden, rng, cfg.init_std)

    def __call__(self, x, mask, mode, keep_rate, rng):
        a, weights = self.attn(self.attn_norm(x), mask)
        x = x + ops.dropout(a, keep_rate, mode, rng)
        f = self.ffn_out(ops.relu(self.ffn_in(self.ffn_norm(x))))
        x = x + ops.dropout(f, keep_rate, mode, rng)
        return x, weights


class StackedEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self._cfg = cfg
        self.token = Embedding(cfg.vocab_size, cfg.hidden, rng, cfg.init_std)
        self.position = Embedding(cfg.max_position, cfg.hidden, rng, cfg.init_std)
        self.segment = Embedding(2, cfg.hidden, rng, cfg.init_std)
        self.layers = [TransformerLayer(cfg, rng) for _ in range(cfg.layers)]
        self.final_norm = LayerNorm(cfg.hidden)
        self.pooler = Linear(cfg.hidden, cfg.hidden, rng, cfg.init_std)

    @property
    def config(self) -> EncoderConfig:
        return self._cfg

    def __call__(self, seq, mode: str = "infer", keep_rate: float = 1.0, rng: Optional[np.random.Generator] = None) -> EncoderOutput:
        return encode(seq, self, mode, keep_rate, rng)


def encode(seq, params: StackedEncoder, mode: str = "infer", keep_rate: float = 1.0,
           rng: Optional[np.random.Generator] = None) -> EncoderOutput:
    """Run the encoder on a :class:`TokenSequence` or :class:`EncodedBatch`."""
    if isinstance(seq, TokenSequence):
        seq = EncodedBatch.stack([seq])
    cfg = params.config
    ids, mask, segments = seq.ids, seq.mask, seq.segments
    length = ids.shape[1]
    if length > cfg.max_position:
        raise ContractError(f"sequence length {length} exceeds max_position {cfg.max_position}")
    positions = np.broadcast_to(np.arange(length), ids.shape)
    x = params.token(ids) + params.position(positions) + params.segment(segments)
    x = ops.dropout(x, keep_rate, mode, rng)
    sequence, attention = [], []
    for layer in params.layers:
        x, weights = layer(x, mask, mode, keep_rate, rng)
        sequence.append(x)
        attention.append(weights)
    cls = ops.getitem(params.final_norm(x), (slice(None), 0))
    pooled = ops.tanh(params.pooler(cls))
    return EncoderOutput(pooled, sequence, np.asarray(mask), seq.first_len, seq.second_len,
                         seq.max_first, seq.max_second, attention)


def split_segments(output: EncoderOutput):
    """Per-layer question and answer token features without special tokens.

    Returns ``(questions, answers, q_mask, a_mask)``: two lists of L tensors
    shaped (B, max_first, H) and (B, max_second, H), and float masks marking
    the true tokens.  Invalid slots hold zeros.
    """
    if output.first_len is None or output.max_first is None:
        raise ContractError("encoder output carries no segment boundaries")
    first = np.asarray(output.first_len)
    second = np.asarray(output.second_len)
    dtype = output.sequence[0].dtype
    qslots = np.arange(output.max_first)[None, :]
    aslots = np.arange(output.max_second)[None, :]
    q_mask = qslots < first[:, None]
    a_mask = aslots < second[:, None]
    q_index = np.where(q_mask, 1 + qslots, 0)
    a_index = np.where(a_mask, first[:, None] + 2 + aslots, 0)
    qm = q_mask.astype(dtype)[:, :, None]
    am = a_mask.astype(dtype)[:, :, None]
    questions = [ops.take_rows(h, q_index) * qm for h in output.sequence]
    answers = [ops.take_rows(h, a_index) * am for h in output.sequence]
    return questions, answers, q_mask, a_mask
