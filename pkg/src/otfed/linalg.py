"""Dense float64 helpers with explicit shape checking.

Everything here operates on plain numpy arrays: 2-D float64 "matrices" and
1-D float64 "vectors". Shapes are always checked explicitly and no
broadcasting happens at this API; results are deterministic for identical
inputs.
"""
from __future__ import annotations

from typing import Iterable

import numpy as np

from .errors import ShapeError

# aliases used in signatures throughout the package
Matrix = np.ndarray
Vector = np.ndarray


def as_matrix(values) -> Matrix:
    """Coerce to a C-contiguous float64 2-D array with finite entries."""
    m = np.ascontiguousarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got ndim={m.ndim}")
    if not np.isfinite(m).all():
        raise ValueError("matrix contains non-finite entries")
    return m


def as_vector(values) -> Vector:
    """Coerce to a contiguous float64 1-D array with finite entries."""
    v = np.ascontiguousarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"expected a 1-D array, got ndim={v.ndim}")
    if not np.isfinite(v).all():
        raise ValueError("vector contains non-finite entries")
    return v


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with an explicit inner-dimension check."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def pairwise_euclidean(a: Matrix, b: Matrix) -> Matrix:
    """Euclidean distance between every row of `a` and every row of `b`.

    Computed from explicit row differences so d(x, x) is exactly zero.
    Result has shape (a.rows, b.rows).
    """
    if a.shape[1] != b.shape[1]:
        raise ShapeError(
            f"pairwise_euclidean column mismatch: {a.shape[1]} vs {b.shape[1]}"
        )
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def frobenius_dot(a: Matrix, b: Matrix) -> float:
    """Entrywise inner product <a, b>."""
    if a.shape != b.shape:
        raise ShapeError(f"frobenius_dot shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sum(a * b))


def _array_seq(x) -> list[np.ndarray]:
    # model-like objects expose .arrays(); bare arrays and sequences pass through
    if hasattr(x, "arrays"):
        return list(x.arrays())
    if isinstance(x, np.ndarray):
        return [x]
    if isinstance(x, Iterable):
        return [np.asarray(a, dtype=np.float64) for a in x]
    raise ShapeError(f"cannot interpret {type(x).__name__} as an array sequence")


def sq_norm_diff(a, b) -> float:
    """Sum of squared entry differences over all matching arrays.

    Accepts single arrays or model-like objects exposing `.arrays()` (layer
    stacks); both operands must present the same number of arrays with
    identical shapes.
    """
    seq_a, seq_b = _array_seq(a), _array_seq(b)
    if len(seq_a) != len(seq_b):
        raise ShapeError(
            f"incompatible layer counts: {len(seq_a)} vs {len(seq_b)}"
        )
    total = 0.0
    for xa, xb in zip(seq_a, seq_b):
        if xa.shape != xb.shape:
            raise ShapeError(f"shape mismatch in sq_norm_diff: {xa.shape} vs {xb.shape}")
        d = xa - xb
        total += float(np.sum(d * d))
    return total
