"""Hot-loop kernels with a compiled core and a numpy fallback.

The compiled extension (``elacnn._ckernels``) is used when it imports and the
arrays are float32. Anything else, including the float64 arrays used by the
gradient checks, goes through :mod:`elacnn._fallback`. Both paths accumulate
in the same order, so switching backend never changes a float32 result.

Set ``ELACNN_BACKEND=python`` to force the fallback at import time.
"""

from __future__ import annotations

import contextlib
import os

import numpy as np

from . import _fallback
from .errors import ContractError

try:
    if os.environ.get("ELACNN_BACKEND", "").lower() == "python":
        raise ImportError("fallback forced by ELACNN_BACKEND")
    from . import _ckernels
except ImportError:
    _ckernels = None

_active = _ckernels


def compiled_available() -> bool:
    return _ckernels is not None


def backend_name() -> str:
    return "compiled" if _active is not None else "python"


def set_backend(name: str) -> None:
    """Switch between ``"compiled"`` and ``"python"`` for the whole process."""
    global _active
    if name == "python":
        _active = None
    elif name == "compiled":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not available in this build")
        _active = _ckernels
    else:
        raise ValueError(f"unknown backend {name!r}")


@contextlib.contextmanager
def use_backend(name: str):
    previous = backend_name()
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def _impl(*arrays):
    if _active is not None and all(a is None or a.dtype == np.float32 for a in arrays):
        return _active
    return _fallback


def _c(a):
    return None if a is None else np.ascontiguousarray(a)


def conv2d_forward(x, w, b):
    """Valid stride-1 cross-correlation of NHWC ``x`` with HWIO ``w`` plus bias."""
    x, w, b = _c(x), _c(w), _c(b)
    return _impl(x, w, b).conv2d_forward(x, w, b)


def conv2d_grad_weights(x, g, kh, kw):
    """Weight and bias gradients summed over the batch in sample order."""
    x, g = _c(x), _c(g)
    return _impl(x, g).conv2d_grad_weights(x, g, kh, kw)


def conv2d_grad_input(g, w):
    """Input gradient, computed as a valid correlation of the zero-padded
    output gradient with the flipped, channel-transposed kernel."""
    kh, kw = w.shape[:2]
    gp = np.pad(g, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
    wf = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
    zero = np.zeros(w.shape[2], dtype=w.dtype)
    return conv2d_forward(gp, wf, zero)


def maxpool2_forward(x):
    """2x2 stride-2 max pool; returns (pooled, winning slot per output)."""
    x = _c(x)
    return _impl(x).maxpool2_forward(x)


def maxpool2_backward(g, arg):
    g = _c(g)
    return _impl(g).maxpool2_backward(g, np.ascontiguousarray(arg, dtype=np.int8))


def dense_forward(x, w, b=None):
    x, w, b = _c(x), _c(w), _c(b)
    return _impl(x, w, b).dense_forward(x, w, b)


def dense_grad_input(w, g):
    w, g = _c(w), _c(g)
    return _impl(w, g).dense_grad_input(w, g)


def adam_dense(p, m, v, gsum, divisor, consts):
    """In-place Adam update of flat arrays with gradient ``gsum / divisor``."""
    for a in (p, m, v):
        if not a.flags.c_contiguous:
            # reshape(-1) would copy, and the update would be lost
            raise ContractError("adam_dense needs C-contiguous parameter and state arrays")
    impl = _impl(p, m, v, gsum)
    impl.adam_dense(p.reshape(-1), m.reshape(-1), v.reshape(-1), _c(gsum).reshape(-1),
                    divisor, *consts)


def adam_outer(p, m, v, xs, gs, divisor, consts):
    """In-place Adam update with gradient ``sum_s outer(xs[s], gs[s]) / divisor``."""
    xs, gs = _c(xs), _c(gs)
    _impl(p, m, v, xs, gs).adam_outer(p, m, v, xs, gs, divisor, *consts)
