"""Parameter containers and small layers built on :mod:`match2.ops`."""

from __future__ import annotations

from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import ops
from .autograd import Tensor
from .ops import BatchNormState


class Parameter(Tensor):
    def __init__(self, data, dtype=np.float32):
        super().__init__(np.asarray(data, dtype=dtype), requires_grad=True)


def normal(rng: np.random.Generator, shape, std: float) -> Parameter:
    return Parameter(rng.normal(0.0, std, size=shape))


class Module:
    """Discovers parameters and batch-norm states from instance attributes."""

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield f"{name}.{i}", item
            else:
                yield name, value

    def named_parameters(self, prefix: str = "") -> Dict[str, Parameter]:
        out: Dict[str, Parameter] = {}
        for name, value in self._children():
            if isinstance(value, Parameter):
                out[prefix + name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(prefix + name + "."))
        return out

    def named_states(self, prefix: str = "") -> Dict[str, BatchNormState]:
        out: Dict[str, BatchNormState] = {}
        for name, value in self._children():
            if isinstance(value, BatchNormState):
                out[prefix + name] = value
            elif isinstance(value, Module):
                out.update(value.named_states(prefix + name + "."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast parameters and running statistics in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for s in self.named_states().values():
            s.running_mean = s.running_mean.astype(dtype)
            s.running_var = s.running_var.astype(dtype)
        return self

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.dtype(np.float32)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, std: float, bias: bool = True):
        self.weight = normal(rng, (n_out, n_in), std)
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self._eps)


class Embedding(Module):
    def __init__(self, rows: int, dim: int, rng: np.random.Generator, std: float):
        self.table = normal(rng, (rows, dim), std)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return ops.embedding(self.table, ids)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.state = BatchNormState(channels, momentum=momentum, eps=eps)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.state, mode)


class Conv3x3(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, std: float):
        self.weight = normal(rng, (c_out, c_in, 3, 3), std)
        self.bias = Parameter(np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias)


class MLPHead(Module):
    """``sigmoid(W2 relu(W1 v + b1) + b2)``; dropout on the hidden layer."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, std: float):
        self.l1 = Linear(dim, hidden, rng, std)
        self.l2 = Linear(hidden, 1, rng, std)

    def __call__(self, v: Tensor, mode: str = "infer", keep_rate: float = 1.0, rng: Optional[np.random.Generator] = None) -> Tensor:
        h = ops.dropout(ops.relu(self.l1(v)), keep_rate, mode, rng)
        logit = self.l2(h)
        return ops.sigmoid(ops.reshape(logit, logit.shape[:-1]))
