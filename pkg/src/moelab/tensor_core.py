"""Dense float64 kernels used throughout the package.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 in row-major
order; probability vectors are 1-D float64 arrays summing to one.
"""

from __future__ import annotations

import numpy as np

from moelab.errors import InvalidArgumentError, InvalidInputError, NumericalError

KL_FLOOR = 1e-12


def as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{what} contains non-finite values")


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Temperature-scaled softmax along the last axis.

    Works on a single vector or on a stack of rows.
    """
    z = as_f64(logits)
    if not temperature > 0:
        raise InvalidArgumentError(f"temperature must be positive, got {temperature}")
    _check_finite(z, "logits")
    z = z / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits, temperature: float = 1.0) -> np.ndarray:
    z = as_f64(logits)
    if not temperature > 0:
        raise InvalidArgumentError(f"temperature must be positive, got {temperature}")
    _check_finite(z, "logits")
    z = z / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def top_k(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, ascending.

    Ties go to the lowest index.  A 2-D input is processed row by row and
    returns an ``(rows, k)`` integer array.
    """
    s = as_f64(scores)
    n = s.shape[-1]
    if not 1 <= k <= n:
        raise InvalidArgumentError(f"k={k} out of range for {n} scores")
    # stable sort on the negated scores keeps lower indices first among equals
    order = np.argsort(-s, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats with ``0 * ln(0/q) = 0`` and ``q`` floored at 1e-12."""
    p = as_f64(p)
    q = as_f64(q)
    if p.shape != q.shape:
        raise InvalidArgumentError(f"length mismatch: {p.shape} vs {q.shape}")
    support = p > 0
    ps = p[support]
    qs = np.maximum(q[support], KL_FLOOR)
    return float(np.sum(ps * (np.log(ps) - np.log(qs))))


def l1_distance(p, q) -> float:
    p = as_f64(p)
    q = as_f64(q)
    if p.shape != q.shape:
        raise InvalidArgumentError(f"length mismatch: {p.shape} vs {q.shape}")
    return float(np.abs(p - q).sum())


def entropy(p) -> float:
    """Shannon entropy in nats; zero-probability entries contribute nothing."""
    p = as_f64(p)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def truncated_svd(W, r: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Best rank-``r`` factors ``(U, S, V)`` with ``W ~= U @ diag(S) @ V.T``.

    Backed by LAPACK's divide-and-conquer SVD (``numpy.linalg.svd``), which
    is exact to working precision, so the Eckart-Young optimum is attained.
    U is rows x r, S is descending and non-negative, V is cols x r.
    """
    W = as_f64(W)
    if W.ndim != 2:
        raise InvalidArgumentError("truncated_svd expects a matrix")
    rows, cols = W.shape
    if not 1 <= r <= min(rows, cols):
        raise InvalidArgumentError(f"rank {r} out of range for a {rows}x{cols} matrix")
    _check_finite(W, "matrix")
    try:
        U, S, Vt = np.linalg.svd(W, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"SVD of {rows}x{cols} matrix did not converge "
            f"(frobenius norm {np.linalg.norm(W):.6g})"
        ) from exc
    return U[:, :r].copy(), S[:r].copy(), Vt[:r].T.copy()


def low_rank(W, r: int) -> np.ndarray:
    U, S, V = truncated_svd(W, r)
    return (U * S) @ V.T
