"""Hot pairwise kernels for the pattern-similarity layer.

The compiled extension is used when it imports; otherwise the numpy module
is.  Set ``MATCH2_KERNELS=python`` to force the fallback.
"""

import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_NAMES = (
    "pairwise_l1",
    "pairwise_l1_backward",
    "pairwise_l2",
    "pairwise_l2_backward",
    "pairwise_jsd",
    "pairwise_jsd_backward",
)


def available_backends():
    return ["python"] + (["cython"] if _ckernels is not None else [])


def get_backend(name):
    if name == "python":
        return _pykernels
    if name == "cython":
        if _ckernels is None:
            raise ImportError("compiled kernels are not built")
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def _select():
    forced = os.environ.get("MATCH2_KERNELS", "").strip().lower()
    if forced in ("python", "py", "numpy") or _ckernels is None:
        return "python"
    return "cython"


BACKEND = _select()
_impl = get_backend(BACKEND)


def _prep(arrays):
    dtype = np.result_type(*arrays)
    return [np.ascontiguousarray(a, dtype=dtype) for a in arrays]


def _wrap(name):
    def call(*arrays):
        return getattr(_impl, name)(*_prep(arrays))

    call.__name__ = name
    return call


pairwise_l1 = _wrap("pairwise_l1")
pairwise_l1_backward = _wrap("pairwise_l1_backward")
pairwise_l2 = _wrap("pairwise_l2")
pairwise_l2_backward = _wrap("pairwise_l2_backward")
pairwise_jsd = _wrap("pairwise_jsd")
pairwise_jsd_backward = _wrap("pairwise_jsd_backward")
