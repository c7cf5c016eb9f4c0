"""Differentiable tensor operations.

Every op takes and returns :class:`~match2.autograd.Tensor`; array-valued
non-differentiable arguments (masks, index arrays) are plain ndarrays.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .autograd import Function, Tensor
from .errors import ConfigError, ContractError, DegenerateInputError, DimensionError

SIMILARITY_FUNCTIONS = ("dot", "cos", "l1", "l2", "jss")

_kinks = threading.local()


@contextmanager
def record_kinks():
    """Collect the branch pattern of every piecewise op run inside the block.

    Two evaluations whose logs differ took different sides of some kink
    (ReLU, absolute value, probability clamp); a finite difference across
    them measures the jump, not the derivative.
    """
    log: List[np.ndarray] = []
    prev = getattr(_kinks, "log", None)
    _kinks.log = log
    try:
        yield log
    finally:
        _kinks.log = prev


def _note_branch(side: np.ndarray) -> None:
    log = getattr(_kinks, "log", None)
    if log is not None:
        log.append(np.packbits(side))


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


class _Add(Function):
    def forward(self, a, b):
        self.shapes = a.shape, b.shape
        return a + b

    def backward(self, g):
        return unbroadcast(g, self.shapes[0]), unbroadcast(g, self.shapes[1])


class _Sub(Function):
    def forward(self, a, b):
        self.shapes = a.shape, b.shape
        return a - b

    def backward(self, g):
        return unbroadcast(g, self.shapes[0]), unbroadcast(-g, self.shapes[1])


class _Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return unbroadcast(g * self.b, self.a.shape), unbroadcast(g * self.a, self.b.shape)


class _Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        ga = g / self.b
        gb = -g * self.a / (self.b * self.b)
        return unbroadcast(ga, self.a.shape), unbroadcast(gb, self.b.shape)


class _Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class _Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class _Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, g):
        return (g / self.a,)


class _Tanh(Function):
    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, g):
        return (g * (1.0 - self.out * self.out),)


class _Sigmoid(Function):
    def forward(self, a):
        # split by sign so exp never overflows
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        self.out = out
        return out

    def backward(self, g):
        return (g * self.out * (1.0 - self.out),)


class _Relu(Function):
    def forward(self, a):
        self.pos = a > 0
        _note_branch(self.pos)
        return np.where(self.pos, a, 0).astype(a.dtype)

    def backward(self, g):
        return (g * self.pos,)


class _Cast(Function):
    def forward(self, a, dtype):
        self.src = a.dtype
        return a.astype(dtype)

    def backward(self, g):
        return (g.astype(self.src),)


def add(a, b) -> Tensor:
    return _Add.apply(a, b)


def sub(a, b) -> Tensor:
    return _Sub.apply(a, b)


def mul(a, b) -> Tensor:
    return _Mul.apply(a, b)


def div(a, b) -> Tensor:
    return _Div.apply(a, b)


def neg(a) -> Tensor:
    return _Neg.apply(a)


def exp(a) -> Tensor:
    return _Exp.apply(a)


def log(a) -> Tensor:
    return _Log.apply(a)


def tanh(a) -> Tensor:
    return _Tanh.apply(a)


def sigmoid(a) -> Tensor:
    return _Sigmoid.apply(a)


def relu(a) -> Tensor:
    return _Relu.apply(a)


def cast(a, dtype) -> Tensor:
    return _Cast.apply(a, dtype=np.dtype(dtype))


# ---------------------------------------------------------------------------
# reductions and shape


class _Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            axes = (self.axis,) if np.isscalar(self.axis) else self.axis
            axes = tuple(ax % len(self.shape) for ax in axes)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, self.shape).copy(),)


def sum(a, axis=None, keepdims=False) -> Tensor:
    return _Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    if axis is None:
        count = int(np.prod(shape))
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        count = int(np.prod([shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


class _Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.shape),)


class _Transpose(Function):
    def forward(self, a, axes=None):
        self.axes = axes if axes is not None else tuple(reversed(range(a.ndim)))
        return a.transpose(self.axes)

    def backward(self, g):
        return (g.transpose(np.argsort(self.axes)),)


class _GetItem(Function):
    def forward(self, a, index):
        self.shape, self.index = a.shape, index
        return np.asarray(a[index])

    def backward(self, g):
        out = np.zeros(self.shape, dtype=g.dtype)
        np.add.at(out, self.index, g)
        return (out,)


class _Stack(Function):
    def forward(self, *arrays, axis=0):
        self.axis, self.n = axis, len(arrays)
        return np.stack(arrays, axis=axis)

    def backward(self, g):
        return tuple(np.take(g, i, axis=self.axis) for i in range(self.n))


class _TakeRows(Function):
    def forward(self, a, index):
        if a.ndim != 3 or index.ndim != 2 or index.shape[0] != a.shape[0]:
            raise DimensionError(f"take_rows needs (B,T,H) and (B,K) index, got {a.shape} and {index.shape}")
        self.shape, self.index = a.shape, index
        self.rows = np.arange(a.shape[0])[:, None]
        return a[self.rows, index]

    def backward(self, g):
        out = np.zeros(self.shape, dtype=g.dtype)
        np.add.at(out, (self.rows, self.index), g)
        return (out,)


class _Embedding(Function):
    def forward(self, table, ids):
        self.shape, self.ids = table.shape, ids
        return table[ids]

    def backward(self, g):
        out = np.zeros(self.shape, dtype=g.dtype)
        np.add.at(out, self.ids, g)
        return (out,)


def reshape(a, shape) -> Tensor:
    return _Reshape.apply(a, shape=tuple(shape))


def transpose(a, axes=None) -> Tensor:
    return _Transpose.apply(a, axes=None if axes is None else tuple(axes))


def getitem(a, index) -> Tensor:
    return _GetItem.apply(a, index=index)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return _Stack.apply(*tensors, axis=axis)


def take_rows(a, index: np.ndarray) -> Tensor:
    """``out[b, k] = a[b, index[b, k]]`` for a (B, T, H) tensor."""
    return _TakeRows.apply(a, index=np.asarray(index, dtype=np.intp))


def embedding(table, ids: np.ndarray) -> Tensor:
    return _Embedding.apply(table, ids=np.asarray(ids, dtype=np.intp))


# ---------------------------------------------------------------------------
# linear algebra


def _swap(x):
    return np.swapaxes(x, -1, -2)


class _MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise DimensionError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from None
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        ga = unbroadcast(g @ _swap(self.b), self.a.shape)
        gb = unbroadcast(_swap(self.a) @ g, self.b.shape)
        return ga, gb


class _Linear(Function):
    def forward(self, x, w, b=None):
        if x.shape[-1] != w.shape[1]:
            raise DimensionError(f"linear input {x.shape} does not fit weight {w.shape}")
        self.x, self.w, self.has_bias = x, w, b is not None
        out = x @ w.T
        return out + b if b is not None else out

    def backward(self, g):
        x2 = self.x.reshape(-1, self.x.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ self.w
        gw = g2.T @ x2
        if self.has_bias:
            return gx, gw, g2.sum(axis=0)
        return gx, gw


def matmul(a, b) -> Tensor:
    return _MatMul.apply(a, b)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    if bias is None:
        return _Linear.apply(x, weight)
    return _Linear.apply(x, weight, bias)


# ---------------------------------------------------------------------------
# normalisation and activations with structure


class _Softmax(Function):
    def forward(self, a, axis=-1, mask=None):
        self.axis = axis
        if mask is not None:
            mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
            a = np.where(mask, a, -np.inf)
        peak = np.max(a, axis=axis, keepdims=True)
        peak = np.where(np.isfinite(peak), peak, 0)
        e = np.exp(a - peak)
        total = e.sum(axis=axis, keepdims=True)
        self.out = np.where(total > 0, e / np.where(total > 0, total, 1), 0).astype(a.dtype)
        return self.out

    def backward(self, g):
        s = self.out
        return (s * (g - (g * s).sum(axis=self.axis, keepdims=True)),)


def softmax(a, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Stable softmax; positions where ``mask`` is False get weight exactly 0."""
    return _Softmax.apply(a, axis=axis, mask=mask)


class _LayerNorm(Function):
    def forward(self, x, gamma, beta, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.inv
        self.gamma = gamma
        return self.xhat * gamma + beta

    def backward(self, g):
        xhat, inv = self.xhat, self.inv
        n = xhat.shape[-1]
        gx_hat = g * self.gamma
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    return _LayerNorm.apply(x, gamma, beta, eps=eps)


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    channels: int
    momentum: float = 0.9
    eps: float = 1e-5
    running_mean: np.ndarray = field(default=None)  # type: ignore[assignment]
    running_var: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels, dtype=np.float32)
        if self.running_var is None:
            self.running_var = np.ones(self.channels, dtype=np.float32)

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        k = self.momentum
        dtype = self.running_mean.dtype
        self.running_mean = (k * self.running_mean + (1 - k) * mean).astype(dtype)
        self.running_var = (k * self.running_var + (1 - k) * var).astype(dtype)


class _BatchNorm(Function):
    def forward(self, x, gamma, beta, state=None, mode="train"):
        shape = (1, -1) + (1,) * (x.ndim - 2)
        axes = (0,) + tuple(range(2, x.ndim))
        self.gamma, self.mode, self.axes = gamma.reshape(shape), mode, axes
        if mode == "train":
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            state.update(mu, var)
        else:
            mu, var = state.running_mean, state.running_var
        self.inv = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype).reshape(shape)
        self.xhat = (x - mu.astype(x.dtype).reshape(shape)) * self.inv
        return self.xhat * self.gamma + beta.reshape(shape)

    def backward(self, g):
        xhat, axes = self.xhat, self.axes
        gx_hat = g * self.gamma
        if self.mode == "train":
            n = xhat.size // xhat.shape[1]
            gx = self.inv / n * (
                n * gx_hat - gx_hat.sum(axis=axes, keepdims=True) - xhat * (gx_hat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gx_hat * self.inv
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)


def batch_norm(x, gamma, beta, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel normalisation over every axis except 1.

    ``infer`` uses the running statistics; before any ``train`` call these
    are the initial mean 0 / variance 1.
    """
    if mode not in ("train", "infer"):
        raise ConfigError(f"batch_norm mode must be 'train' or 'infer', got {mode!r}")
    if x.shape[1] != state.channels:
        raise DimensionError(f"batch_norm expects {state.channels} channels, got shape {x.shape}")
    return _BatchNorm.apply(x, gamma, beta, state=state, mode=mode)


class _Conv2d(Function):
    def forward(self, x, w, b=None):
        if x.ndim != 4 or w.ndim != 4:
            raise DimensionError(f"conv2d needs 4-d input and kernels, got {x.shape} and {w.shape}")
        if w.shape[2:] != (3, 3):
            raise DimensionError(f"conv2d kernels must be 3x3, got {w.shape}")
        if x.shape[1] != w.shape[1]:
            raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernels {w.shape}")
        bsz, cin, m, n = x.shape
        cout = w.shape[0]
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        cols = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (B, C, m, n, 3, 3)
        cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * m * n, cin * 9)
        self.cols, self.w, self.xshape, self.has_bias = cols, w, x.shape, b is not None
        out = cols @ w.reshape(cout, -1).T
        if b is not None:
            out = out + b
        return np.ascontiguousarray(out.reshape(bsz, m, n, cout).transpose(0, 3, 1, 2))

    def backward(self, g):
        bsz, cin, m, n = self.xshape
        cout = self.w.shape[0]
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ self.cols).reshape(self.w.shape)
        gcols = (g2 @ self.w.reshape(cout, -1)).reshape(bsz, m, n, cin, 3, 3)
        gxp = np.zeros((bsz, cin, m + 2, n + 2), dtype=g.dtype)
        for ki in range(3):
            for kj in range(3):
                gxp[:, :, ki : ki + m, kj : kj + n] += gcols[..., ki, kj].transpose(0, 3, 1, 2)
        gx = gxp[:, :, 1:-1, 1:-1]
        if self.has_bias:
            return gx, gw, g2.sum(axis=0)
        return gx, gw


def conv2d(x, kernels_, bias=None) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1 (output keeps m x n)."""
    if bias is None:
        return _Conv2d.apply(x, kernels_)
    return _Conv2d.apply(x, kernels_, bias)


class _MaskedMeanPool(Function):
    def forward(self, x, mask):
        m = mask.astype(x.dtype)[:, None]
        count = m.sum(axis=(2, 3))
        self.scale = m / count[:, :, None, None]
        return (x * m).sum(axis=(2, 3)) / count

    def backward(self, g):
        return (g[:, :, None, None] * self.scale,)


def global_avg_pool(x, valid_mask: np.ndarray) -> Tensor:
    """Mean over the (m, n) cells flagged valid, per batch item and channel."""
    valid_mask = np.asarray(valid_mask)
    if valid_mask.shape != (x.shape[0],) + tuple(x.shape[2:]):
        raise DimensionError(f"pool mask {valid_mask.shape} does not match input {x.shape}")
    if np.any(valid_mask.reshape(valid_mask.shape[0], -1).sum(axis=1) == 0):
        raise DegenerateInputError("global_avg_pool: a batch item has no valid cell")
    return _MaskedMeanPool.apply(x, mask=valid_mask.astype(bool))


def dropout(x, keep_rate: float, mode: str, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/keep_rate, infer is identity."""
    if not 0.0 < keep_rate <= 1.0:
        raise ConfigError(f"keep_rate must be in (0, 1], got {keep_rate}")
    if mode == "infer" or keep_rate == 1.0:
        return x
    if rng is None:
        raise ConfigError("dropout in train mode needs an explicit rng")
    keep = rng.random(x.shape) < keep_rate
    return mul(x, (keep / keep_rate).astype(x.dtype))


class _BinaryCrossEntropy(Function):
    def forward(self, p, y, eps=1e-7):
        self.y = y.astype(p.dtype)
        self.inside = (p > eps) & (p < 1 - eps)
        _note_branch(self.inside)
        self.pc = np.clip(p, eps, 1 - eps)
        return -(self.y * np.log(self.pc) + (1 - self.y) * np.log(1 - self.pc))

    def backward(self, g):
        gp = -(self.y / self.pc - (1 - self.y) / (1 - self.pc))
        return (g * gp * self.inside,)


def binary_cross_entropy(p, y: np.ndarray, eps: float = 1e-7) -> Tensor:
    """Elementwise BCE on probabilities clamped to [eps, 1 - eps]."""
    return _BinaryCrossEntropy.apply(p, y=np.asarray(y), eps=eps)


# ---------------------------------------------------------------------------
# pattern similarity


class _PairwiseSimilarity(Function):
    def forward(self, x, y, fn="dot", mask=None):
        lead = x.shape[:-2]
        m, w = x.shape[-2:]
        n = y.shape[-2]
        self.lead = lead
        x = x.reshape(-1, m, w)
        y = y.reshape(-1, n, w)
        if mask is None:
            mask = np.ones(x.shape[0:1] + (w,), dtype=bool)
        else:
            mask = np.broadcast_to(mask, lead + (w,)).reshape(-1, w)
        self.mask = mask[:, None, :]
        xm, ym = x * self.mask, y * self.mask
        self.fn, self.xm, self.ym = fn, xm, ym
        if fn == "dot":
            out = xm @ _swap(ym)
        elif fn == "cos":
            dots = xm @ _swap(ym)
            self.nx = np.sqrt((xm * xm).sum(-1))
            self.ny = np.sqrt((ym * ym).sum(-1))
            denom = self.nx[:, :, None] * self.ny[:, None, :]
            self.ok = denom > 0
            self.denom = np.where(self.ok, denom, 1)
            out = np.where(self.ok, dots / self.denom, 0)
        elif fn == "l1":
            if getattr(_kinks, "log", None) is not None:
                _note_branch(xm[:, :, None, :] > ym[:, None, :, :])
            out = 1.0 / (1.0 + kernels.pairwise_l1(xm, ym))
        elif fn == "l2":
            self.dist = kernels.pairwise_l2(xm, ym)
            out = 1.0 / (1.0 + self.dist)
        elif fn == "jss":
            self.p = _masked_softmax(x, self.mask)
            self.q = _masked_softmax(y, self.mask)
            out = 1.0 - np.clip(kernels.pairwise_jsd(self.p, self.q), 0.0, 1.0)
        else:
            raise ConfigError(f"unknown similarity function {fn!r}; expected one of {SIMILARITY_FUNCTIONS}")
        self.out = out.astype(x.dtype)
        return self.out.reshape(lead + (m, n))

    def backward(self, g):
        m, n = self.out.shape[1:]
        g = g.reshape(-1, m, n)
        xm, ym, s = self.xm, self.ym, self.out
        if self.fn == "dot":
            gx, gy = g @ ym, _swap(g) @ xm
        elif self.fn == "cos":
            gd = np.where(self.ok, g / self.denom, 0)
            gs = g * s
            nx2 = np.where(self.nx > 0, self.nx * self.nx, 1)[:, :, None]
            ny2 = np.where(self.ny > 0, self.ny * self.ny, 1)[:, :, None]
            gx = gd @ ym - xm * gs.sum(axis=2)[:, :, None] / nx2
            gy = _swap(gd) @ xm - ym * gs.sum(axis=1)[:, :, None] / ny2
        elif self.fn == "l1":
            gx, gy = kernels.pairwise_l1_backward(xm, ym, -g * s * s)
        elif self.fn == "l2":
            gx, gy = kernels.pairwise_l2_backward(xm, ym, self.dist, -g * s * s)
        else:
            gp, gq = kernels.pairwise_jsd_backward(self.p, self.q, -g)
            gx = self.p * (gp - (gp * self.p).sum(-1, keepdims=True))
            gy = self.q * (gq - (gq * self.q).sum(-1, keepdims=True))
        gx = (gx * self.mask).astype(xm.dtype)
        gy = (gy * self.mask).astype(ym.dtype)
        w = xm.shape[-1]
        return gx.reshape(self.lead + (m, w)), gy.reshape(self.lead + (n, w))


def _masked_softmax(a: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mask = np.broadcast_to(mask, a.shape)
    z = np.where(mask, a, -np.inf)
    peak = np.max(z, axis=-1, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0)
    e = np.exp(z - peak)
    total = e.sum(axis=-1, keepdims=True)
    return np.where(total > 0, e / np.where(total > 0, total, 1), 0).astype(a.dtype)


def pairwise_similarity(x, y, fn: str = "dot", mask: Optional[np.ndarray] = None) -> Tensor:
    """Similarity of every row of ``x`` (.., m, w) with every row of ``y`` (.., n, w).

    ``mask`` (.., w) selects the shared-axis positions that enter the
    comparison.  Functions: dot, cos (0 when a norm is 0), l1 and l2
    (1 / (1 + distance)), jss (1 - base-2 Jensen-Shannon divergence of the
    row softmaxes).
    """
    if fn not in SIMILARITY_FUNCTIONS:
        raise ConfigError(f"unknown similarity function {fn!r}; expected one of {SIMILARITY_FUNCTIONS}")
    if x.shape[:-2] != y.shape[:-2] or x.shape[-1] != y.shape[-1]:
        raise ContractError(f"pattern shapes disagree on layers or answer length: {x.shape} vs {y.shape}")
    return _PairwiseSimilarity.apply(x, y, fn=fn, mask=mask)

