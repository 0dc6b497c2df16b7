"""Vector and grid arithmetic shared by the scoring, masking and loss code.

Embedding vectors are 1-D float arrays, scalar fields are 2-D float arrays
indexed ``[row, col]``.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .errors import ContractViolation, ZeroNormError

UNIT_TOL = 1e-9


def as_vector(v: Sequence[float] | np.ndarray) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ContractViolation(f"expected a non-empty 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation("vector has non-finite entries")
    return arr


def is_unit(v: np.ndarray, tol: float = UNIT_TOL) -> bool:
    return abs(float(np.linalg.norm(v)) - 1.0) <= tol


def cosine(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    """Cosine similarity, clamped to [-1, 1].

    Raises ZeroNormError if either vector is all zeros.
    """
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise ContractViolation(f"dimension mismatch: {a.size} vs {b.size}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine of a zero vector is undefined")
    c = float(np.dot(a, b)) / (na * nb)
    return min(1.0, max(-1.0, c))


def lse_pool(sims: Sequence[float] | np.ndarray, beta: float) -> float:
    """Smooth maximum ``(1/beta) * log(sum(exp(beta * sims)))``."""
    x = np.asarray(sims, dtype=np.float64).ravel()
    if x.size == 0:
        raise ContractViolation("lse_pool needs at least one value")
    if not beta > 0:
        raise ContractViolation(f"beta must be positive, got {beta}")
    m = float(x.max())
    return m + float(np.log(np.sum(np.exp(beta * (x - m))))) / beta


def lse_weights(sims: Sequence[float] | np.ndarray, beta: float) -> np.ndarray:
    """Gradient of :func:`lse_pool` with respect to ``sims`` (a softmax)."""
    x = np.asarray(sims, dtype=np.float64).ravel()
    e = np.exp(beta * (x - x.max()))
    return e / e.sum()


def normalize_unit(v: Sequence[float] | np.ndarray) -> np.ndarray:
    v = as_vector(v)
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ZeroNormError("cannot normalize a zero vector")
    return v / n


def normalize_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ZeroNormError("cannot normalize a zero row")
    return m / norms


def normalize_range01(field: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]; a constant field maps to all zeros."""
    f = np.asarray(field, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise ContractViolation("field has non-finite entries")
    lo = float(f.min())
    hi = float(f.max())
    if hi <= lo:
        return np.zeros_like(f)
    return (f - lo) / (hi - lo)


def _axis_weights(n_in: int, n_out: int) -> np.ndarray:
    # Half-pixel centre convention with edge clamping.
    w = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        w[i, lo] += 1.0 - frac
        w[i, hi] += frac
    return w


def bilinear_resize(field: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling of a 2-D field onto a ``(rows, cols)`` grid."""
    f = np.asarray(field, dtype=np.float64)
    if f.ndim != 2:
        raise ContractViolation(f"expected a 2-D field, got shape {f.shape}")
    rows, cols = shape
    if (rows, cols) == f.shape:
        return f.copy()
    return _axis_weights(f.shape[0], rows) @ f @ _axis_weights(f.shape[1], cols).T
