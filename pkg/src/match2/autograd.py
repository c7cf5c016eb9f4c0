"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and, when produced by a differentiable
operation, a reference to the :class:`Function` node that created it.  Calling
:func:`backward` on a scalar tensor linearises the graph into a
:class:`ComputationTape` and replays it once in reverse order.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Any, Iterator, Optional, Sequence

import numpy as np

from .errors import ContractError

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def precision(dtype: Any) -> Iterator[None]:
    """Set the dtype used for tensors created from non-array data."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    """Dense array with an optional gradient."""

    __array_priority__ = 100

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = None, _node: Optional["Function"] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node = _node

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype: Any) -> "Tensor":
        from . import ops

        return ops.cast(self, dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops

        return ops.div(other, self)

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops

        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)


def as_tensor(x: Any, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


class Function:
    """A differentiable operation.

    Subclasses implement ``forward`` on raw arrays and ``backward`` returning
    one gradient array (or ``None``) per tensor input.  Non-tensor arguments
    are passed as keywords and stored by the subclass as needed.
    """

    def __init__(self) -> None:
        self.inputs: tuple = ()

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Any, **kwargs: Any) -> Tensor:
        tensors = [x for x in inputs if isinstance(x, Tensor)]
        like = tensors[0] if tensors else None
        inputs = tuple(as_tensor(x, like) for x in inputs)
        fn = cls()
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        needs = _grad_enabled() and any(t.requires_grad for t in inputs)
        if not needs:
            return Tensor(out)
        fn.inputs = inputs
        return Tensor(out, requires_grad=True, _node=fn)


class ComputationTape:
    """Topologically ordered records of the graph feeding one output."""

    def __init__(self, records: list, output: Tensor):
        self.records = records
        self.output = output

    @classmethod
    def from_output(cls, output: Tensor) -> "ComputationTape":
        order: list = []
        seen: set = set()
        stack = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if t._node is None:
                continue
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in t._node.inputs:
                if inp._node is not None and id(inp) not in seen:
                    stack.append((inp, False))
        return cls(order, output)

    def __len__(self) -> int:
        return len(self.records)

    def replay(self, seed: np.ndarray) -> None:
        grads = {id(self.output): seed}
        for t in reversed(self.records):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            in_grads = t._node.backward(g)
            for inp, gi in zip(t._node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=inp.dtype)
                if gi.shape != inp.shape:
                    raise ContractError(f"gradient shape {gi.shape} does not match input shape {inp.shape}")
                if inp._node is None:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    prev = grads.get(id(inp))
                    grads[id(inp)] = gi if prev is None else prev + gi


def backward(loss: Tensor, tape: Optional[ComputationTape] = None) -> ComputationTape:
    """Accumulate ``d loss / d leaf`` into ``.grad`` of every requires-grad leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = ComputationTape.from_output(loss)
    seed = np.ones(loss.shape, dtype=loss.dtype)
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return tape
    tape.replay(seed)
    return tape
