"""Dense float64 linear algebra used by every other module.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. The helpers
here validate shapes and finiteness at the public boundary and otherwise defer
to numpy, which is deterministic for a fixed build and thread count.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ShapeError

Matrix = np.ndarray


def as_matrix(m, name: str = "matrix") -> Matrix:
    """Coerce ``m`` to a finite 2-D float64 array."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def as_vector(v, name: str = "vector") -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def require_square(m: Matrix, name: str = "matrix") -> Matrix:
    m = as_matrix(m, name)
    if m.shape[0] != m.shape[1]:
        raise ShapeError(f"{name} must be square, got shape {m.shape}")
    return m


def matmul(a, b) -> Matrix:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def transpose(m) -> Matrix:
    return as_matrix(m).T.copy()


def row_softmax(m) -> Matrix:
    """Row-wise softmax with per-row max subtraction."""
    m = as_matrix(m)
    z = np.exp(m - m.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def toeplitz_split(m) -> tuple[Matrix, Matrix]:
    """Return the symmetric and skew-symmetric parts ``((M+M^T)/2, (M-M^T)/2)``."""
    m = require_square(m)
    mt = m.T
    return (m + mt) / 2.0, (m - mt) / 2.0


def frobenius_norm(m) -> float:
    m = as_matrix(m)
    return float(np.sqrt(np.sum(m * m)))


def row_norms(m) -> np.ndarray:
    m = as_matrix(m)
    return np.sqrt(np.sum(m * m, axis=1))


def col_norms(m) -> np.ndarray:
    m = as_matrix(m)
    return np.sqrt(np.sum(m * m, axis=0))


def outer(u, v) -> Matrix:
    return np.outer(as_vector(u, "u"), as_vector(v, "v"))


def numerical_rank(m, rtol: float = 1e-9) -> int:
    """Count singular values above ``rtol * sigma_max``."""
    sv = np.linalg.svd(as_matrix(m), compute_uv=False)
    if sv[0] == 0.0:
        return 0
    return int(np.sum(sv > rtol * sv[0]))


def worker_count() -> int:
    """Worker cap from ``ATTN_GEOM_THREADS``; unset or 0 means one per CPU."""
    raw = os.environ.get("ATTN_GEOM_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"ATTN_GEOM_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ValueError("ATTN_GEOM_THREADS must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)
