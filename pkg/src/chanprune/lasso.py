"""Channel selection by LASSO over per-channel contributions.

Each input channel ``i`` of a conv layer contributes ``X_i @ W_i.T`` to the
layer's response. Stacking these contributions as columns of a design ``Z``
turns channel selection into a single-response LASSO

    minimize (1/2M) ||y - Z beta||^2 + lam * ||beta||_1

solved here by cyclic coordinate descent on the Gram matrix. The solver's
stopping rule is the KKT certificate, so ``converged`` always means the
returned point is certified optimal to ``tol``.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import scipy.linalg

from .tensorcore import RankDeficientError, ShapeError, lstsq, soft_threshold


@dataclass
class ChannelDesign:
    Z: np.ndarray  # (M, c)
    y: np.ndarray  # (M,)
    col_norms: np.ndarray  # (c,)
    gram: np.ndarray = field(repr=False, default=None)
    zty: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.gram is None:
            self.gram = self.Z.T @ self.Z
        if self.zty is None:
            self.zty = self.Z.T @ self.y

    @property
    def m(self):
        return self.Z.shape[0]

    @property
    def c(self):
        return self.Z.shape[1]

    @property
    def lambda_max(self):
        """Smallest lambda at which beta = 0 is optimal."""
        return float(np.max(np.abs(self.zty)) / self.m) if self.c else 0.0

    def gradient(self, beta):
        """Z^T (y - Z beta) / M computed directly from Z."""
        return self.Z.T @ (self.y - self.Z @ beta) / self.m

    def objective(self, beta, lam):
        r = self.y - self.Z @ beta
        return float(r @ r / (2 * self.m) + lam * np.abs(beta).sum())


def build_channel_design(samples, W) -> ChannelDesign:
    """Per-channel contribution design from a SampleSet and current weights.

    ``W`` is the layer's ``n x (c*kh*kw)`` weight matrix.
    """
    kh, kw = samples.kernel
    return design_from_arrays(samples.X, samples.Y, W, kh * kw)


def design_from_arrays(X, Y, W, kernel_area) -> ChannelDesign:
    """``X`` is ``N x (c*k)``, ``Y`` is ``N x n``, ``W`` is ``n x (c*k)``.

    Column ``i`` of Z is ``vec(X_i @ W_i.T)``, flattened row-major like ``Y``.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    N, cols = X.shape
    n = W.shape[0]
    if cols % kernel_area or W.shape[1] != cols or Y.shape != (N, n):
        raise ShapeError(f"inconsistent shapes X{X.shape} Y{Y.shape} W{W.shape} kernel_area={kernel_area}")
    c = cols // kernel_area
    if c < 1:
        raise ShapeError("design needs at least one channel")
    Xr = X.reshape(N, c, kernel_area)
    Wr = W.reshape(n, c, kernel_area)
    Z = np.einsum("Nck,nck->Nnc", Xr, Wr, optimize=True).reshape(N * n, c)
    return ChannelDesign(Z, Y.reshape(-1).copy(), np.linalg.norm(Z, axis=0))


@dataclass
class BetaVector:
    beta: np.ndarray
    lam: float
    iterations: int
    converged: bool
    kkt: float

    @property
    def nnz(self):
        return int(np.count_nonzero(self.beta))

    @property
    def support(self):
        return [int(i) for i in np.flatnonzero(self.beta)]


def kkt_residual(d: ChannelDesign, beta, lam, grad=None):
    """Largest violation of the LASSO optimality conditions at ``beta``."""
    g = d.gradient(beta) if grad is None else grad
    nz = beta != 0
    viol = np.where(nz, np.abs(g - lam * np.sign(beta)), np.maximum(np.abs(g) - lam, 0.0))
    return float(viol.max()) if viol.size else 0.0


def _polish(d: ChannelDesign, beta, lam):
    """Solve the optimality system on the support of ``beta`` with its signs fixed.

    Returns the refined point, or ``None`` when the support is rank
    deficient or a sign flips (the fixed-sign system is then not the LASSO
    solution).
    """
    support = np.flatnonzero(beta)
    if not support.size or support.size > d.m:
        return None
    q, r = np.linalg.qr(d.Z[:, support])
    diag = np.abs(np.diag(r))
    if diag.min() <= d.m * np.finfo(float).eps * diag.max():
        return None
    signs = np.sign(beta[support])
    # Z_S^T Z_S b = Z_S^T y - M lam s  with Z_S = QR
    rhs = q.T @ d.y - d.m * lam * scipy.linalg.solve_triangular(r, signs, trans="T")
    b = scipy.linalg.solve_triangular(r, rhs)
    if np.any(np.sign(b) != signs):
        return None
    out = np.zeros_like(beta)
    out[support] = b
    return out


def lasso_cd(d: ChannelDesign, lam, tol=1e-6, max_iter=10000, beta0=None, trace=None) -> BetaVector:
    """Cyclic coordinate descent; stops once the KKT residual is <= ``tol``.

    A converged point is then polished by an exact solve on its support
    (kept only if it certifies at least as well), which removes the slow
    tail of coordinate descent on ill-conditioned designs.
    ``trace``, when a list, receives the objective value after every sweep.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    M, c = d.m, d.c
    G, zty = d.gram, d.zty
    diag = np.diag(G).copy()
    active = np.flatnonzero(d.col_norms > 0)
    beta = np.zeros(c) if beta0 is None else np.asarray(beta0, dtype=np.float64).copy()
    beta[d.col_norms == 0] = 0.0
    q = zty - G @ beta  # Z^T residual, maintained incrementally
    sweeps, kkt = 0, np.inf
    converged = False
    for sweeps in range(1, max_iter + 1):
        for i in active:
            old = beta[i]
            rho = (q[i] + diag[i] * old) / M
            new = soft_threshold(rho, lam) / (diag[i] / M)
            if new != old:
                q -= G[:, i] * (new - old)
                beta[i] = new
        if trace is not None:
            trace.append(d.objective(beta, lam))
        q = zty - G @ beta
        kkt = kkt_residual(d, beta, lam, grad=q / M)
        if kkt <= tol:
            converged = True
            break
    if converged:
        polished = _polish(d, beta, lam)
        if polished is not None:
            pk = kkt_residual(d, polished, lam)
            if pk <= kkt:
                beta, kkt = polished, pk
    return BetaVector(beta, float(lam), sweeps, converged, kkt)


def unregularized(d: ChannelDesign, tol=1e-6, max_iter=10000) -> BetaVector:
    """The lambda = 0 solution, by direct least squares when Z allows it."""
    active = np.flatnonzero(d.col_norms > 0)
    beta = np.zeros(d.c)
    try:
        beta[active] = lstsq(d.Z[:, active], d.y)[:, 0]
    except RankDeficientError:
        return lasso_cd(d, 0.0, tol, max_iter)
    kkt = kkt_residual(d, beta, 0.0)
    return BetaVector(beta, 0.0, 0, kkt <= tol, kkt)


@dataclass
class LambdaSearch:
    lam: float
    beta: BetaVector
    kept: List[int]
    padded: bool
    path: List[Tuple[float, int]]


def _pad_support(d, beta, budget):
    support = [int(i) for i in np.flatnonzero(beta)]
    if len(support) >= budget:
        return support[:budget]
    corr = np.abs(d.gradient(beta))
    zeros = [i for i in range(d.c) if beta[i] == 0]
    # largest correlation with the current residual first; ties to lower index
    zeros.sort(key=lambda i: (-corr[i], i))
    return sorted(support + zeros[:budget - len(support)])


def search_lambda(d: ChannelDesign, budget, tol=1e-6, max_iter=10000, steps=64) -> LambdaSearch:
    """Find lambda whose LASSO solution keeps exactly ``budget`` channels.

    Bisects on ``[0, lambda_max]`` with warm starts. When no probed lambda
    lands on the budget, the smallest-lambda solution with fewer nonzeros is
    padded with the zero channels most correlated with its residual.
    """
    c = d.c
    if not 1 <= budget <= c:
        raise ValueError(f"budget {budget} outside [1, {c}]")
    path = []
    if budget == c:
        sol = unregularized(d, tol, max_iter)
        path.append((0.0, sol.nnz))
        kept = _pad_support(d, sol.beta, budget)
        return LambdaSearch(0.0, sol, kept, sol.nnz != budget, path)
    lo, hi = 0.0, d.lambda_max
    best = BetaVector(np.zeros(c), hi, 0, True, kkt_residual(d, np.zeros(c), hi))
    path.append((hi, 0))
    warm: Optional[np.ndarray] = None
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        sol = lasso_cd(d, mid, tol, max_iter, beta0=warm)
        warm = sol.beta
        path.append((mid, sol.nnz))
        if sol.nnz == budget:
            return LambdaSearch(mid, sol, sol.support, False, path)
        if sol.nnz > budget:
            lo = mid
        else:
            hi = mid
            best = sol
    kept = _pad_support(d, best.beta, budget)
    return LambdaSearch(best.lam, best, kept, True, path)
