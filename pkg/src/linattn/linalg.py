"""Dense float64 linear algebra used by every kernel.

Vectors and matrices are plain ``numpy.ndarray`` objects of dtype float64.
Each helper validates shapes and raises :class:`ContractViolation` on a
mismatch instead of letting numpy broadcast silently.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ContractViolation",
    "as_vec",
    "as_mat",
    "matvec",
    "outer",
    "softmax",
    "sigmoid",
    "elementwise_mul",
    "matmul",
    "transpose",
    "axpy",
    "identity",
    "zeros",
]


class ContractViolation(ValueError):
    """Raised when an operation receives inputs violating its preconditions."""


def as_vec(x, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ContractViolation(f"{name} must be 1-d, got shape {v.shape}")
    return v


def as_mat(x, name: str = "matrix") -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ContractViolation(f"{name} must be 2-d, got shape {m.shape}")
    return m


def identity(k: int) -> np.ndarray:
    return np.eye(k, dtype=np.float64)


def zeros(rows: int, cols: int | None = None) -> np.ndarray:
    return np.zeros((rows, rows if cols is None else cols), dtype=np.float64)


def matvec(M, v) -> np.ndarray:
    """Return ``M @ v`` for a (r, c) matrix and a length-c vector."""
    M = as_mat(M, "M")
    v = as_vec(v, "v")
    if M.shape[1] != v.shape[0]:
        raise ContractViolation(f"matvec: {M.shape} @ ({v.shape[0]},)")
    return M @ v


def outer(u, v) -> np.ndarray:
    """Outer product; ``outer(h, h)`` is exactly symmetric."""
    return np.multiply.outer(as_vec(u, "u"), as_vec(v, "v"))


def softmax(x, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax along ``axis``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ContractViolation("softmax of an empty vector")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(x) -> np.ndarray:
    """Logistic function, evaluated without overflow for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    # 1 / (1 + e^-x) = exp(-log(1 + e^-x)); logaddexp never overflows
    return np.exp(-np.logaddexp(0.0, -x))


def elementwise_mul(u, v) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ContractViolation(f"elementwise_mul: {u.shape} vs {v.shape}")
    return u * v


def matmul(A, B) -> np.ndarray:
    A = as_mat(A, "A")
    B = as_mat(B, "B")
    if A.shape[1] != B.shape[0]:
        raise ContractViolation(f"matmul: {A.shape} @ {B.shape}")
    return A @ B


def transpose(M) -> np.ndarray:
    return np.ascontiguousarray(as_mat(M).T)


def axpy(s: float, X, Y) -> np.ndarray:
    """Return ``s * X + Y``."""
    X = as_mat(X, "X")
    Y = as_mat(Y, "Y")
    if X.shape != Y.shape:
        raise ContractViolation(f"axpy: {X.shape} vs {Y.shape}")
    return s * X + Y
