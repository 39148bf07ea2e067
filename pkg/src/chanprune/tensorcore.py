"""Dense float64 matrix primitives shared by the solver and the pruner.

Matrices are plain 2-D ``numpy.ndarray`` objects in float64. Inputs of other
dtypes are upcast at the boundary.
"""
import numpy as np
import scipy.linalg


class ShapeError(ValueError):
    pass


class RankDeficientError(np.linalg.LinAlgError):
    """Raised by :func:`lstsq` when the design matrix lacks full column rank."""

    def __init__(self, rank, cols):
        self.rank = int(rank)
        self.cols = int(cols)
        super().__init__(f"design matrix is rank deficient: numerical rank {rank} < {cols} columns")


def as_matrix(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a, b):
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def lstsq(a, b):
    """Least-squares solution of ``a @ x ~= b`` via column-pivoted QR.

    ``a`` must have full column rank; otherwise :class:`RankDeficientError`
    is raised with the detected numerical rank.
    """
    a, b = as_matrix(a), as_matrix(b)
    n, p = a.shape
    if n < 1 or p < 1:
        raise ShapeError(f"empty design matrix {a.shape}")
    if b.shape[0] != n:
        raise ShapeError(f"row mismatch: a is {a.shape}, b is {b.shape}")
    if n < p:
        raise RankDeficientError(n, p)
    q, r, perm = scipy.linalg.qr(a, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(n, p) * np.finfo(np.float64).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.count_nonzero(diag > tol))
    if rank < p:
        raise RankDeficientError(rank, p)
    z = scipy.linalg.solve_triangular(r, q.T @ b)
    x = np.empty_like(z)
    x[perm] = z
    return x


def soft_threshold(x, t):
    if np.any(np.asarray(t) < 0):
        raise ValueError("threshold must be non-negative")
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def frobenius(a):
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64)))


def rel_error(approx, ref):
    approx = np.asarray(approx, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if approx.shape != ref.shape:
        raise ShapeError(f"shape mismatch {approx.shape} vs {ref.shape}")
    denom = frobenius(ref)
    if denom == 0.0:
        raise ZeroDivisionError("reference has zero Frobenius norm")
    return frobenius(approx - ref) / denom


def normal_residual(a, x, b):
    """max |aᵀ(ax - b)|, the optimality residual of a least-squares fit."""
    a, x, b = as_matrix(a), as_matrix(x), as_matrix(b)
    return float(np.max(np.abs(a.T @ (a @ x - b))))
