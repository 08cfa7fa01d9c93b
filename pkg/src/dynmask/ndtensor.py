"""Small tensor-op layer over numpy arrays with pinned numerics.

Arrays are plain numpy ndarrays restricted to f32/f64. The ops that do
reductions (matmul, softmax_row) go through the numba kernels so the
accumulation order is fixed; the elementwise ops are plain numpy.
"""

import numpy as np

from . import kernels
from .errors import DegenerateRowError, DimensionError

_ALLOWED = (np.float32, np.float64)


def check_tensor(x, name: str = "tensor") -> np.ndarray:
    if not isinstance(x, np.ndarray):
        raise DimensionError(f"{name}: expected ndarray, got {type(x).__name__}")
    if x.dtype not in _ALLOWED:
        raise DimensionError(f"{name}: dtype must be float32 or float64, got {x.dtype}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D matrix product with f64 accumulation in a fixed order.

    Raises DimensionError on rank, dtype, or inner-dimension mismatch.
    """
    check_tensor(a, "a")
    check_tensor(b, "b")
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.dtype != b.dtype:
        raise DimensionError(f"matmul operand dtypes differ: {a.dtype} vs {b.dtype}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    out = np.empty((a.shape[0], b.shape[1]), dtype=a.dtype)
    kernels.matmul_into(a, b, out)
    return out


def softmax_row(x: np.ndarray) -> np.ndarray:
    """Row softmax where -inf entries come out exactly 0.0.

    Works on the last axis of any rank >= 1. A row with no finite entry
    raises DegenerateRowError.
    """
    check_tensor(x, "x")
    if x.ndim == 0:
        raise DimensionError("softmax_row needs at least 1-D input")
    flat = np.ascontiguousarray(x.reshape(-1, x.shape[-1]))
    out = np.empty_like(flat)
    status = np.empty(flat.shape[0], dtype=np.int64)
    kernels.softmax_rows_into(flat, out, status)
    if np.any(status == 0):
        bad = int(np.argmax(status == 0))
        raise DegenerateRowError(f"row {bad} has no finite entries")
    return out.reshape(x.shape)


def softplus(x: np.ndarray) -> np.ndarray:
    # Pinned overflow guard: values above 30 pass through unchanged.
    check_tensor(x, "x")
    return np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))


def sigmoid(x: np.ndarray) -> np.ndarray:
    check_tensor(x, "x")
    pos = 1.0 / (1.0 + np.exp(-np.maximum(x, 0.0)))
    ex = np.exp(np.minimum(x, 0.0))
    neg = ex / (1.0 + ex)
    return np.where(x >= 0.0, pos, neg).astype(x.dtype, copy=False)


_ELEMENTWISE_OPS = ("exp", "softplus", "add_scalar", "scale")


def elementwise(x: np.ndarray, op: str, value: float | None = None) -> np.ndarray:
    """Apply a named elementwise op; add_scalar and scale need value."""
    check_tensor(x, "x")
    if op == "exp":
        return np.exp(x)
    if op == "softplus":
        return softplus(x)
    if op == "add_scalar":
        if value is None:
            raise DimensionError("add_scalar needs value")
        return x + x.dtype.type(value)
    if op == "scale":
        if value is None:
            raise DimensionError("scale needs value")
        return x * x.dtype.type(value)
    raise DimensionError(f"unknown elementwise op {op!r}, expected one of {_ELEMENTWISE_OPS}")
