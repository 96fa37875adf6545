"""Linear projection baseline solved as a generalized symmetric eigenproblem."""

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .errors import ContractError, NumericError


def sym_eig(A, tol=1e-14, max_sweeps=100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, V)`` with eigenvalues in descending order and the
    matching orthonormal eigenvectors as columns of ``V``.  Equal eigenvalues
    keep the order in which they appear on the rotated diagonal.
    """
    A = np.array(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractError("sym_eig needs a square matrix")
    n = A.shape[0]
    scale = max(1.0, np.abs(A).max(initial=0.0))
    if np.abs(A - A.T).max(initial=0.0) > 1e-10 * scale:
        raise ContractError("sym_eig needs a symmetric matrix")
    A = 0.5 * (A + A.T)
    V = np.eye(n)
    norm = np.linalg.norm(A)
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(np.triu(A, 1) ** 2))
        if off <= tol * norm or off == 0.0:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                diag = abs(A[p, p]) + abs(A[q, q])
                if abs(apq) <= 1e-18 * diag or abs(apq) < 1e-300:
                    A[p, q] = A[q, p] = 0.0
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p = A[:, p].copy()
                col_q = A[:, q]
                A[:, p] = c * col_p - s * col_q
                A[:, q] = s * col_p + c * col_q
                row_p = A[p, :].copy()
                row_q = A[q, :]
                A[p, :] = c * row_p - s * row_q
                A[q, :] = s * row_p + c * row_q
                A[p, q] = A[q, p] = 0.0
                v_p = V[:, p].copy()
                v_q = V[:, q]
                V[:, p] = c * v_p - s * v_q
                V[:, q] = s * v_p + c * v_q
    else:
        raise NumericError("Jacobi iteration did not converge")
    evals = np.diag(A).copy()
    order = np.argsort(-evals, kind="stable")
    return evals[order], V[:, order]


@dataclass(frozen=True)
class DucaConfig:
    """``rho`` regularises the whitening constraint (default: 1e-3 times the
    mean feature variance scale, ``tr(Xc Xc^T) / d``); ``rho_prime`` is the
    ridge on the objective side."""

    q: int
    lam_p: float = 1.0
    rho: float = None
    rho_prime: float = 0.0

    def __post_init__(self):
        if self.q < 1:
            raise ContractError("projection dimension must be positive")
        if self.rho is not None and not self.rho > 0:
            raise ContractError("rho must be positive")
        if self.lam_p < 0:
            raise ContractError("lam_p must be non-negative")


def duca_projection(X, Y, P, cfg):
    """Projection ``W`` (``d x q``) maximising utility over privacy discriminant power.

    Solves ``max tr(W^T A W)`` subject to ``W^T B W = I`` with
    ``A = Xc Y Y^T Xc^T - rho' I - lam_p Xc P P^T Xc^T`` and
    ``B = Xc Xc^T + rho I`` by whitening with the Cholesky factor of ``B`` and
    diagonalising with :func:`sym_eig`.  Each column is signed so that its
    largest-magnitude entry is positive.  Returns ``(W, eigenvalues)``.
    """
    X = np.asarray(X, dtype=float)
    d, n = X.shape
    if n < 2:
        raise ContractError("duca_projection needs at least two samples")
    if cfg.q > d:
        raise ContractError(f"q={cfg.q} exceeds the feature dimension {d}")
    Y = np.asarray(Y, dtype=float)
    P = np.asarray(P, dtype=float)
    Xc = X - X.mean(axis=1, keepdims=True)
    XY = Xc @ Y
    XP = Xc @ P
    A = XY @ XY.T - cfg.lam_p * (XP @ XP.T)
    if cfg.rho_prime:
        A = A - cfg.rho_prime * np.eye(d)
    S = Xc @ Xc.T
    rho = cfg.rho if cfg.rho is not None else 1e-3 * np.trace(S) / d
    if not rho > 0:
        raise NumericError("constraint ridge is zero; data has no variance")
    try:
        L = np.linalg.cholesky(S + rho * np.eye(d))
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"constraint matrix not positive definite ({exc})") from exc
    tmp = sla.solve_triangular(L, A, lower=True)
    M = sla.solve_triangular(L, tmp.T, lower=True).T
    M = 0.5 * (M + M.T)
    evals, V = sym_eig(M)
    W = sla.solve_triangular(L.T, V[:, : cfg.q], lower=False)
    for j in range(W.shape[1]):
        if W[np.argmax(np.abs(W[:, j])), j] < 0:
            W[:, j] = -W[:, j]
    return W, evals[: cfg.q]
