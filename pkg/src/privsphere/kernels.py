"""Kernel matrices and closed-form two-sample statistics.

Samples are columns: ``Z`` is ``(q, N)``.  Label matrices are ``(N, L)`` with
one row per sample.

Everything here works on plain arrays.  :func:`kernel_matrix` and
:func:`rf_feature_map` also accept graph nodes and then return nodes, which is
how the differentiable privacy losses are assembled.
"""

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg as sla

from . import autodiff as ad
from .errors import ContractError, DimensionError, NumericError

DEFAULT_BANDWIDTHS = (1.0, 2.0, 4.0, 8.0, 16.0)
SQRT_EPS = 1e-12


@dataclass(frozen=True)
class KernelSpec:
    """Kernel choice.

    ``variant`` is ``"gaussian-mixture"`` (mean of Gaussians, one per
    bandwidth), ``"random-fourier"`` (random cos/sin features approximating the
    same mixture) or ``"linear"`` (plain inner products, used by the ridge
    oracle).
    """

    variant: str = "gaussian-mixture"
    bandwidths: tuple = DEFAULT_BANDWIDTHS
    rf_dim: int = 1000
    rf_seed: int = 0

    def __post_init__(self):
        if self.variant not in ("gaussian-mixture", "random-fourier", "linear"):
            raise ContractError(f"unknown kernel variant {self.variant!r}")
        object.__setattr__(self, "bandwidths", tuple(float(s) for s in self.bandwidths))
        if self.variant != "linear":
            if not self.bandwidths or min(self.bandwidths) <= 0:
                raise ContractError("bandwidths must be strictly positive")
        if self.variant == "random-fourier":
            if self.rf_dim <= 0 or self.rf_dim % 2:
                raise ContractError("rf_dim must be a positive even integer")

    def frequencies(self, q):
        """The ``(q, rf_dim // 2)`` frequency table for ``q``-dimensional inputs."""
        return _rf_frequencies(self, q)


_RF_CACHE = {}


def _rf_frequencies(spec, q):
    key = (spec.bandwidths, spec.rf_dim, spec.rf_seed, q)
    omega = _RF_CACHE.get(key)
    if omega is None:
        rng = np.random.default_rng(spec.rf_seed)
        n_freq = spec.rf_dim // 2
        # frequency j serves bandwidth j mod T
        sigmas = np.array([spec.bandwidths[j % len(spec.bandwidths)] for j in range(n_freq)])
        omega = rng.standard_normal((q, n_freq)) / sigmas[None, :]
        omega.setflags(write=False)
        _RF_CACHE[key] = omega
    return omega


def _is_node(*xs):
    return any(isinstance(x, ad.Node) for x in xs)


def kernel_matrix(A, B, spec=KernelSpec()):
    """Kernel matrix with entry ``(i, j) = k(A[:, i], B[:, j])``."""
    a_val = A.value if isinstance(A, ad.Node) else np.asarray(A, dtype=float)
    b_val = B.value if isinstance(B, ad.Node) else np.asarray(B, dtype=float)
    if a_val.ndim != 2 or b_val.ndim != 2 or a_val.shape[0] != b_val.shape[0]:
        raise DimensionError(
            f"kernel_matrix needs (d, n) and (d, m) inputs, got {a_val.shape} and {b_val.shape}"
        )
    if spec.variant == "linear":
        if _is_node(A, B):
            return ad.matmul(ad.transpose(A), B)
        return a_val.T @ b_val
    if spec.variant == "random-fourier":
        fa = rf_feature_map(A, spec)
        fb = fa if B is A else rf_feature_map(B, spec)
        if _is_node(fa, fb):
            return ad.matmul(ad.transpose(fa), fb)
        return fa.T @ fb

    T = len(spec.bandwidths)
    if _is_node(A, B):
        d2 = ad.sq_dist(A, B)
        k = None
        for s in spec.bandwidths:
            term = ad.exp(d2 * (-0.5 / s**2))
            k = term if k is None else k + term
        return k * (1.0 / T)
    d2 = (
        (a_val * a_val).sum(0)[:, None]
        + (b_val * b_val).sum(0)[None, :]
        - 2.0 * (a_val.T @ b_val)
    )
    d2 = np.maximum(d2, 0.0)
    if A is B:
        np.fill_diagonal(d2, 0.0)
    k = np.zeros_like(d2)
    for s in spec.bandwidths:
        k += np.exp(-d2 / (2.0 * s**2))
    return k / T


def center_kernel(K):
    """Double-centre a square kernel matrix: ``C K C`` with ``C = I - 11^T/N``."""
    if isinstance(K, ad.Node):
        n = K.value.shape[0]
        if K.value.ndim != 2 or K.value.shape[1] != n:
            raise ContractError("center_kernel needs a square matrix")
        C = np.eye(n) - 1.0 / n
        return ad.matmul(ad.matmul(C, K), C)
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ContractError("center_kernel needs a square matrix")
    Kc = K - K.mean(axis=0, keepdims=True)
    return Kc - Kc.mean(axis=1, keepdims=True)


def rf_feature_map(Z, spec):
    """Random Fourier features, ``(rf_dim, N)``.

    Rows come in cos/sin pairs scaled by ``sqrt(2 / rf_dim)``, so each column
    has unit norm and inner products approximate the Gaussian-mixture kernel.
    """
    if spec.variant != "random-fourier":
        raise ContractError("rf_feature_map requires a random-fourier KernelSpec")
    z_val = Z.value if isinstance(Z, ad.Node) else np.asarray(Z, dtype=float)
    if z_val.ndim != 2:
        raise DimensionError("rf_feature_map expects a (q, N) matrix")
    omega = spec.frequencies(z_val.shape[0])
    scale = np.sqrt(2.0 / spec.rf_dim)
    if isinstance(Z, ad.Node):
        proj = ad.matmul(omega.T, Z)
        return _vstack_nodes(ad.cos(proj), ad.sin(proj)) * scale
    proj = omega.T @ z_val
    return np.vstack([np.cos(proj), np.sin(proj)]) * scale


def _vstack_nodes(top, bottom):
    n_top = top.value.shape[0]
    n_bot = bottom.value.shape[0]
    upper = np.vstack([np.eye(n_top), np.zeros((n_bot, n_top))])
    lower = np.vstack([np.zeros((n_top, n_bot)), np.eye(n_bot)])
    return ad.matmul(upper, top) + ad.matmul(lower, bottom)


def _labels_matrix(labels, n):
    P = np.asarray(labels, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    if P.shape[0] != n:
        raise DimensionError(f"label matrix has {P.shape[0]} rows, data has {n} samples")
    return P


def _reproducible_kernel(Z, spec):
    """Kernel matrix whose entry for a pair depends only on the two columns.

    Squared distances are accumulated feature by feature instead of through a
    matrix product, so repeated columns give bit-identical rows.  Together
    with exactly rounded sums this makes the statistic vanish exactly on equal
    multisets.
    """
    if spec.variant == "linear":
        return kernel_matrix(Z, Z, spec)
    d2 = np.zeros((Z.shape[1], Z.shape[1]))
    for row in Z:
        d2 += (row[:, None] - row[None, :]) ** 2
    k = np.zeros_like(d2)
    for s in spec.bandwidths:
        k += np.exp(-d2 / (2.0 * s**2))
    return k / len(spec.bandwidths)


def mmd(Z, labels, spec=KernelSpec(), strict=True):
    """Biased MMD statistic between privacy classes.

    ``labels`` is one-hot ``(N, L)`` or a vector of class ids.  Each class is compared against the rest
    and the per-class statistics are weighted by ``N_l / N``; with two classes
    this is the plain two-sample statistic.  Classes (or complements) with no
    samples raise when ``strict`` is true and are skipped otherwise.
    """
    Z = np.asarray(Z, dtype=float)
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[:, None] == np.unique(labels)[None, :]
    P = _labels_matrix(labels, Z.shape[1])
    n = Z.shape[1]
    counts = P.sum(axis=0)
    if spec.variant == "random-fourier":
        F = rf_feature_map(Z, spec)
    else:
        K = _reproducible_kernel(Z, spec)
    total = 0.0
    for l in range(P.shape[1]):
        n_in, n_out = counts[l], n - counts[l]
        if n_in == 0 or n_out == 0:
            if strict:
                raise ContractError(f"privacy class {l} has no samples on one side")
            continue
        inside = P[:, l] > 0.5
        if spec.variant == "random-fourier":
            diff = F[:, inside].mean(axis=1) - F[:, ~inside].mean(axis=1)
            sq = float(diff @ diff)
        else:
            k00 = math.fsum(K[np.ix_(inside, inside)].ravel()) / n_in**2
            k11 = math.fsum(K[np.ix_(~inside, ~inside)].ravel()) / n_out**2
            k01 = math.fsum(K[np.ix_(inside, ~inside)].ravel()) / (n_in * n_out)
            sq = k00 + k11 - 2.0 * k01
        total += (n_in / n) * np.sqrt(max(sq, 0.0))
    return float(total)


def _check_rho(rho):
    if not rho > 0:
        raise ContractError(f"ridge rho must be positive, got {rho}")


def kdi(Z, P, spec=KernelSpec(), rho=1e-4):
    """Kernel discriminant information ``tr(P^T Kc (Kc + rho I)^{-1} P)``.

    ``Kc`` is the centred kernel matrix of ``Z``.  This equals
    ``tr((Kc^2 + rho Kc)^+ Kc P P^T Kc)``; the resolvent form is used because
    it only needs a positive definite solve.
    """
    _check_rho(rho)
    Z = np.asarray(Z, dtype=float)
    n = Z.shape[1]
    if n < 2:
        raise ContractError("kdi needs at least two samples")
    P = _labels_matrix(P, n)
    Kc = center_kernel(kernel_matrix(Z, Z, spec))
    Pc = P - P.mean(axis=0, keepdims=True)
    A = Kc + rho * np.eye(n)
    try:
        factor = sla.cho_factor(A, lower=True)
    except sla.LinAlgError as exc:
        raise NumericError(f"kdi: regularised kernel matrix not positive definite ({exc})") from exc
    X = sla.cho_solve(factor, Pc)
    return float(np.sum(Pc * (Kc @ X)))


def mlpd_linear_oracle(Z, P, rho):
    """Minimum loss of a ridge regressor predicting ``P`` from the columns of ``Z``.

    Solves ``min_{W,b} ||Z^T W + 1 b^T - P||_F^2 + rho ||W||_F^2`` in closed
    form with an explicit bias and returns the attained loss.
    """
    _check_rho(rho)
    Z = np.asarray(Z, dtype=float)
    q, n = Z.shape
    P = _labels_matrix(P, n)
    Zc = Z - Z.mean(axis=1, keepdims=True)
    Pc = P - P.mean(axis=0, keepdims=True)
    S = Zc @ Zc.T + rho * np.eye(q)
    try:
        W = np.linalg.solve(S, Zc @ Pc)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"ridge system is singular ({exc})") from exc
    b = (P.sum(axis=0) - W.T @ Z.sum(axis=1)) / n
    resid = Z.T @ W + b[None, :] - P
    return float(np.sum(resid**2) + rho * np.sum(W**2))


@dataclass
class PermutationTestResult:
    observed: float
    permuted: np.ndarray = field(repr=False)

    @cached_property
    def p_value(self):
        exceed = int(np.sum(self.permuted >= self.observed))
        return (1 + exceed) / (1 + len(self.permuted))


def _binary_mmd_from_kernel(K, mask, n0, n1):
    k00 = K[np.ix_(mask, mask)].sum() / n1**2
    k11 = K[np.ix_(~mask, ~mask)].sum() / n0**2
    k01 = K[np.ix_(mask, ~mask)].sum() / (n0 * n1)
    return np.sqrt(max(k00 + k11 - 2.0 * k01, 0.0))


def permutation_test(Z, s, spec=KernelSpec(), n_perm=999, seed=0):
    """Label-permutation test of ``P(Z | s=0) = P(Z | s=1)`` with the MMD statistic.

    Shuffles keep the class sizes fixed.  The p-value counts permutations whose
    statistic reaches the observed one, plus one for the observation itself.
    """
    Z = np.asarray(Z, dtype=float)
    s = np.asarray(s).reshape(-1)
    if s.shape[0] != Z.shape[1]:
        raise DimensionError("label vector length must match the number of samples")
    if n_perm < 99:
        raise ContractError("n_perm must be at least 99")
    classes = np.unique(s)
    if len(classes) != 2:
        raise ContractError(f"permutation_test needs exactly two classes, got {len(classes)}")
    mask = s == classes[1]
    n1 = int(mask.sum())
    n0 = len(s) - n1
    K = kernel_matrix(Z, Z, spec)
    observed = _binary_mmd_from_kernel(K, mask, n0, n1)
    rng = np.random.default_rng(seed)
    perms = np.empty(n_perm)
    for i in range(n_perm):
        perms[i] = _binary_mmd_from_kernel(K, rng.permutation(mask), n0, n1)
    # identical statistics may differ in the last bits after reordering sums
    tol = 1e-12 * max(1.0, observed)
    perms = np.where(np.abs(perms - observed) <= tol, observed, perms)
    return PermutationTestResult(observed=float(observed), permuted=perms)
