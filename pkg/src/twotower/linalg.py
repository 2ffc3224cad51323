"""Dense float64 helpers shared by every other module.

Matrices are plain 2-D ``numpy.ndarray`` objects; there is no wrapper type.
Every public function accepts array-likes, computes in float64, and
guarantees finite output. Reductions run through numpy's fixed evaluation
order, so repeated calls on identical inputs are bit-reproducible within a
process.
"""

from typing import NamedTuple

import numpy as np

from .errors import DegenerateRowError, ShapeError

# Rows with Euclidean norm below this are treated as zero vectors.
ZERO_NORM_EPS = 1e-12


def as_matrix(x, name="matrix") -> np.ndarray:
    """Coerce ``x`` to a finite float64 2-D array or raise."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError(f"{name} contains non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with shape and finiteness checking.

    Raises ShapeError naming both shapes when the inner dimensions differ,
    and ValueError if the product overflows to non-finite values.
    """
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}"
        )
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    if not np.isfinite(out).all():
        raise ValueError("matrix product overflowed to non-finite values")
    return out


class NormalizedRows(NamedTuple):
    matrix: np.ndarray
    degenerate: np.ndarray  # bool per row; True where the input row was ~zero


def l2_normalize_rows(m) -> NormalizedRows:
    """Scale each row to unit Euclidean norm.

    Rows with norm below ``ZERO_NORM_EPS`` cannot be normalized; they come
    back as all-zero rows, flagged in ``degenerate``. Callers decide whether
    a degenerate row is an error.
    """
    m = as_matrix(m)
    with np.errstate(over="ignore"):
        norms = np.sqrt((m * m).sum(axis=1))
    if not np.isfinite(norms).all():
        raise ValueError("row norms overflowed to non-finite values")
    degenerate = norms < ZERO_NORM_EPS
    safe = np.where(degenerate, 1.0, norms)
    out = m / safe[:, None]
    out[degenerate] = 0.0
    return NormalizedRows(out, degenerate)


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction.

    The shift makes arbitrarily large logits safe: exp never overflows and
    each output row sums to 1 to within accumulated rounding.
    """
    m = as_matrix(m)
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(m) -> np.ndarray:
    """Row-wise log-softmax, max-shifted for the same stability reasons."""
    m = as_matrix(m)
    shifted = m - m.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cosine_similarity_matrix(a, b) -> np.ndarray:
    """All-pairs cosine similarity between rows of ``a`` and rows of ``b``.

    Entry (i, j) is dot(a_i, b_j) / (|a_i| |b_j|). Both inputs must be free
    of zero rows; a degenerate row raises with its row index so callers can
    name the offending item.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(
            f"cosine inputs need matching widths, got {a.shape} and {b.shape}"
        )
    out = []
    for name, mat in (("a", a), ("b", b)):
        normed, bad = l2_normalize_rows(mat)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DegenerateRowError(
                f"row {i} of {name} has zero norm; cosine undefined", row=i
            )
        out.append(normed)
    return out[0] @ out[1].T
