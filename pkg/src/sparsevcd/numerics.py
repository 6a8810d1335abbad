"""Deterministic dense linear-algebra and probability primitives.

All arithmetic is float64. Reductions use strict left-to-right accumulation
(``np.add.accumulate`` is a sequential loop, unlike BLAS/pairwise ``np.dot``),
so identical inputs reproduce identical bits. ``-inf`` is the only legal
sentinel for masked logits; NaN anywhere is a bug.
"""

from __future__ import annotations

import numpy as np

NEG_INF = float("-inf")


def as_vector(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {v.shape}")
    return v


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {m.shape}")
    return np.ascontiguousarray(m)


def dot(a, b) -> float:
    """Inner product with fixed left-to-right accumulation."""
    a = as_vector(a)
    b = as_vector(b)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"dot: length mismatch {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] == 0:
        return 0.0
    return float(np.add.accumulate(a * b)[-1])


def matvec(m, v) -> np.ndarray:
    """Row-wise dot of ``m`` against ``v``, left-to-right per row."""
    m = as_matrix(m)
    v = as_vector(v)
    if m.shape[1] != v.shape[0]:
        raise ValueError(f"matvec: shape mismatch {m.shape} vs {v.shape[0]}")
    if m.shape[0] == 0:
        return np.zeros(0)
    if m.shape[1] == 0:
        return np.zeros(m.shape[0])
    return np.add.accumulate(m * v, axis=1)[:, -1]


def weighted_sum_rows(weights, m) -> np.ndarray:
    """Sum of matrix rows scaled by ``weights``, accumulated top-to-bottom."""
    m = as_matrix(m)
    w = as_vector(weights)
    if w.shape[0] != m.shape[0]:
        raise ValueError(f"weighted_sum_rows: {w.shape[0]} weights for {m.shape[0]} rows")
    if m.shape[0] == 0:
        raise ValueError("weighted_sum_rows: empty matrix")
    return np.add.accumulate(w[:, None] * m, axis=0)[-1, :]


def stable_softmax(x) -> np.ndarray:
    """Max-subtracted softmax; -inf entries get probability exactly 0."""
    x = as_vector(x)
    if x.shape[0] == 0:
        raise ValueError("stable_softmax: empty support")
    m = np.max(x)
    if not np.isfinite(m):
        raise ValueError("stable_softmax: empty support (all entries are -inf)")
    e = np.exp(x - m)
    total = float(np.add.accumulate(e)[-1])
    return e / total
