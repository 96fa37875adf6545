"""Differentiable losses for the private sphere, public sphere and discriminator.

Representations ``Z`` are ``(q, N)`` graph nodes; label matrices are ``(N, L)``
arrays.  Class weights ``N_l / N`` come from the batch at hand, and a class
that is absent from the batch (or fills all of it) drops out of the one-vs-rest
sums with a :class:`EmptyClassWarning`.
"""

import enum
import warnings

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, ContractError
from .kernels import KernelSpec, SQRT_EPS, center_kernel, kernel_matrix, rf_feature_map

ORTHO_WEIGHT = 10.0
PROB_CEILING = 1.0 - 1e-12


class EmptyClassWarning(UserWarning):
    pass


class PrivacyObjectiveKind(enum.Enum):
    MMD = "mmd"
    KDI = "kdi"
    WDN = "wdn"
    LSDN = "lsdn"

    @property
    def requires_discriminator(self):
        return self in (PrivacyObjectiveKind.WDN, PrivacyObjectiveKind.LSDN)

    @property
    def supports_continuous_labels(self):
        return self in (PrivacyObjectiveKind.KDI, PrivacyObjectiveKind.LSDN)


def _labels(P, n):
    P = np.asarray(P, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    if P.shape[0] != n:
        raise DimensionError(f"label matrix has {P.shape[0]} rows, batch has {n} samples")
    return P


def one_vs_rest_weights(P):
    """Contrast vectors and class weights for the one-vs-rest statistics.

    Returns ``(D, w)`` where column ``l`` of ``D`` is ``p_l / N_l - pbar_l / Nbar_l``
    and ``w[l] = N_l / N``.  Degenerate classes get a zero column and weight.
    """
    n, L = P.shape
    counts = P.sum(axis=0)
    D = np.zeros((n, L))
    w = np.zeros(L)
    for l in range(L):
        n_in, n_out = counts[l], n - counts[l]
        if n_in < 0.5 or n_out < 0.5:
            warnings.warn(f"privacy class {l} is degenerate in this batch; term skipped",
                          EmptyClassWarning, stacklevel=3)
            continue
        D[:, l] = P[:, l] / n_in - (1.0 - P[:, l]) / n_out
        w[l] = n_in / n
    return D, w


def utility_loss(logits, Y):
    """Mean softmax cross-entropy; ``logits`` is ``(C, N)``, ``Y`` is ``(N, C)``."""
    logits = ad.as_node(logits)
    Y = np.asarray(Y, dtype=float)
    if Y.T.shape != logits.value.shape:
        raise DimensionError(f"logits {logits.value.shape} do not match labels {Y.shape}")
    logp = ad.clamp_max(ad.log_softmax(logits), np.log(PROB_CEILING))
    return -(logp * Y.T).sum() / float(Y.shape[0])


def privacy_loss_mmd(Z, P, spec=KernelSpec()):
    Z = ad.as_node(Z)
    P = _labels(P, Z.value.shape[1])
    D, w = one_vs_rest_weights(P)
    if spec.variant == "random-fourier":
        diff = ad.matmul(rf_feature_map(Z, spec), D)
        sq = ad.square(diff).sum(axis=0)
    else:
        K = kernel_matrix(Z, Z, spec)
        sq = (ad.matmul(K, D) * D).sum(axis=0)
    return (ad.sqrt(sq, eps=SQRT_EPS) * w).sum()


def privacy_loss_kdi(Z, P, spec=KernelSpec(), rho=1e-4):
    if not rho > 0:
        raise ContractError(f"ridge rho must be positive, got {rho}")
    Z = ad.as_node(Z)
    n = Z.value.shape[1]
    if n < 2:
        raise ContractError("kdi needs at least two samples")
    P = _labels(P, n)
    Pc = P - P.mean(axis=0, keepdims=True)
    Kc = center_kernel(kernel_matrix(Z, Z, spec))
    X = ad.solve_spd(Kc + rho * np.eye(n), Pc)
    return (ad.matmul(Kc, X) * Pc).sum()


def _wdn_contrast(out, P):
    D, w = one_vs_rest_weights(P)
    # per-class mean of output l on class l minus its mean on the rest
    per_class = (out * D.T).sum(axis=1)
    return (per_class * w).sum()


def privacy_loss_wdn(Z, P, discriminator):
    """Negated one-vs-rest critic loss; discriminator weights are held fixed."""
    Z = ad.as_node(Z)
    P = _labels(P, Z.value.shape[1])
    out = discriminator(Z, frozen=True)
    if out.value.shape[0] != P.shape[1]:
        raise DimensionError("the WDN needs one output per privacy class")
    return -_wdn_contrast(out, P)


def privacy_loss_lsdn(Z, P, discriminator):
    """Squared distance of the discriminator's predictions to the batch label mean."""
    Z = ad.as_node(Z)
    P = _labels(P, Z.value.shape[1])
    out = discriminator(Z, frozen=True)
    if out.value.shape[0] != P.shape[1]:
        raise DimensionError("discriminator output must match the label dimension")
    mu = P.mean(axis=0)[:, None]
    return ad.square(out - mu).sum() / float(P.shape[0])


def gradient_penalty(Z, P, discriminator):
    """Two-sided penalty on the input-gradient norm of each sample's own-class output."""
    Z = ad.as_node(Z)
    P = _labels(P, Z.value.shape[1])
    G = ad.input_gradient_graph(discriminator.layer_nodes(), Z, select=P.T)
    norms = ad.sqrt(ad.square(G).sum(axis=0), eps=SQRT_EPS)
    return ad.square(norms - 1.0).sum() / float(P.shape[0])


def disc_loss_wdn(Z, P, discriminator, lam_r=10.0):
    """Critic loss plus ``lam_r`` times the gradient penalty; ``Z`` is held fixed."""
    if lam_r < 0:
        raise ContractError("lam_r must be non-negative")
    Zs = ad.stop_gradient(Z)
    P = _labels(P, Zs.value.shape[1])
    out = discriminator(Zs)
    if out.value.shape[0] != P.shape[1]:
        raise DimensionError("the WDN needs one output per privacy class")
    loss = _wdn_contrast(out, P)
    if lam_r > 0:
        loss = loss + gradient_penalty(Zs, P, discriminator) * lam_r
    return loss


def disc_loss_lsdn(Z, P, discriminator):
    Zs = ad.stop_gradient(Z)
    P = _labels(P, Zs.value.shape[1])
    out = discriminator(Zs)
    if out.value.shape != P.T.shape:
        raise DimensionError(f"discriminator output {out.value.shape} vs labels {P.shape}")
    return ad.square(out - P.T).sum() / float(P.shape[0])


def orthonormality_penalty(W):
    """``||W^T W - I||_F^2`` for a ``(p, k)`` weight with ``p >= k``."""
    W = ad.as_node(W)
    p, k = W.value.shape
    if p < k:
        raise ContractError(f"no orthonormal frame of {k} columns in dimension {p}")
    return ad.square(ad.matmul(ad.transpose(W), W) - np.eye(k)).sum()


def private_sphere_loss(utility, privacy, lam_p, ortho=None, ortho_weight=ORTHO_WEIGHT):
    """``L_U + lam_p * L_P`` plus the weighted orthonormality penalty when given."""
    if lam_p < 0:
        raise ContractError("lam_p must be non-negative")
    total = ad.as_node(utility)
    if lam_p > 0:
        total = total + ad.as_node(privacy) * lam_p
    if ortho is not None:
        total = total + ad.as_node(ortho) * ortho_weight
    return total
