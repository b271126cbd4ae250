"""Dense vector primitives: cosine similarity and overflow-safe softmax.

All arithmetic is carried out in float64.
"""
from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, EmptyInput, ZeroVector

# Norms below this are treated as the zero vector.
ZERO_NORM_EPS = 1e-12
# Tolerance used by invariants checks (softmax sums, replay comparisons).
SUM_TOL = 1e-9


def as_embedding(values, dim: int | None = None) -> np.ndarray:
    """Coerce ``values`` to a finite 1-D float64 array, optionally checking its length."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionMismatch(f"embedding must be 1-D, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise DimensionMismatch(f"expected dimension {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("embedding has non-finite components")
    return arr


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes {a.shape} and {b.shape} differ")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < ZERO_NORM_EPS or nb < ZERO_NORM_EPS:
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    c = float(np.dot(a, b)) / (na * nb)
    return min(1.0, max(-1.0, c))


def cosine_to_many(v, rows) -> np.ndarray:
    """Cosine similarity between ``v`` and each row of ``rows``."""
    v = np.asarray(v, dtype=np.float64)
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if rows.shape[1] != v.shape[0]:
        raise DimensionMismatch(f"row dimension {rows.shape[1]} != {v.shape[0]}")
    nv = np.linalg.norm(v)
    nr = np.linalg.norm(rows, axis=1)
    if nv < ZERO_NORM_EPS or np.any(nr < ZERO_NORM_EPS):
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    return np.clip(rows @ v / (nr * nv), -1.0, 1.0)


def logsumexp(scores, axis=None):
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise EmptyInput("logsumexp of an empty input")
    m = np.max(s, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(s - m), axis=axis, keepdims=True))
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def stable_softmax(scores, axis: int = -1) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise EmptyInput("softmax of an empty input")
    z = np.exp(s - np.max(s, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)
