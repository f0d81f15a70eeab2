"""Dense float32 array helpers.

Tensors are plain C-contiguous ``numpy.ndarray`` objects of dtype float32;
this module adds the checked constructor, the fixed-order matrix product and
the valid-convolution shape arithmetic the network geometry is built on.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import kernels
from .errors import ContractError

DTYPE = np.float32


def check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(e) for e in shape)
    if not 1 <= len(shape) <= 4:
        raise ContractError(f"tensors have 1 to 4 axes, got shape {shape}")
    if any(e < 1 for e in shape):
        raise ContractError(f"every extent must be >= 1, got shape {shape}")
    return shape


def tensor(data, shape: Sequence[int]) -> np.ndarray:
    """Build a float32 tensor from flat row-major ``data`` and ``shape``.

    The number of values must equal the product of the extents exactly; no
    reshaping or broadcasting is attempted.
    """
    shape = check_shape(shape)
    flat = np.asarray(data, dtype=DTYPE).reshape(-1)
    if flat.size != int(np.prod(shape)):
        raise ContractError(f"{flat.size} values cannot fill shape {shape}")
    return np.ascontiguousarray(flat.reshape(shape))


def zeros(shape: Sequence[int]) -> np.ndarray:
    return np.zeros(check_shape(shape), dtype=DTYPE)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed accumulation order.

    ``out[i, j]`` starts at 0 and takes the terms ``a[i,t]*b[t,j]`` for
    ascending ``t``, so results are reproducible bit for bit, unlike a BLAS
    call. For float32 each step is a fused multiply-add (one rounding).
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ContractError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"inner extents differ: {a.shape} x {b.shape}")
    dtype = np.result_type(a, b)
    return kernels.dense_forward(a.astype(dtype, copy=False), b.astype(dtype, copy=False))


def conv_output_extent(size: int, kernel: int) -> int:
    """Output extent of a valid, stride-1 convolution."""
    if kernel < 1 or size < kernel:
        raise ContractError(f"input extent {size} is smaller than kernel {kernel}")
    return size - kernel + 1
