"""Post-hoc attack suite run on released representations.

Members are multinomial logistic regression, a Gaussian kernel ridge
classifier, k-nearest neighbours and an MLP shaped like the privacy
discriminator.  All of them standardise features with training statistics
first.  The privacy score is the best test accuracy over the suite.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedKFold
from sklearn.neighbors import KNeighborsClassifier

from . import autodiff as ad
from .errors import ContractError
from .kernels import KernelSpec, kernel_matrix
from .networks import DiscriminatorSpec, build_network
from .objectives import utility_loss

log = logging.getLogger(__name__)

MEMBERS = ("linear", "kernel-ridge", "knn", "mlp")


@dataclass(frozen=True)
class Representation:
    """Output of the private sphere, ``(q, N)``.  Adversaries only accept this type."""

    Z: np.ndarray

    def __post_init__(self):
        if np.ndim(self.Z) != 2:
            raise ContractError("a representation is a (q, N) matrix")

    @property
    def n_samples(self):
        return self.Z.shape[1]


def release(private_sphere, X):
    return Representation(private_sphere.apply(X))


@dataclass(frozen=True)
class AdversarySuiteConfig:
    members: tuple = MEMBERS
    folds: int = 5
    logistic_c: tuple = (1e-2, 1e-1, 1.0, 10.0, 100.0)
    ridge: tuple = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0)
    bandwidth_factors: tuple = (0.25, 0.5, 1.0, 2.0, 4.0)
    k_values: tuple = (1, 5, 15)
    kernel_max_train: int = 2000
    mlp_hidden: tuple = (1024,)
    mlp_epochs: int = 250
    mlp_lr: float = 1e-3
    mlp_batch: int = 500
    seed: int = 0

    def __post_init__(self):
        if not self.members:
            raise ContractError("the adversary suite needs at least one member")
        unknown = set(self.members) - set(MEMBERS)
        if unknown:
            raise ContractError(f"unknown adversaries: {sorted(unknown)}")
        for name in ("logistic_c", "ridge", "bandwidth_factors", "k_values"):
            if not getattr(self, name):
                raise ContractError(f"hyperparameter grid {name!r} is empty")
        if self.folds < 2:
            raise ContractError("cross-validation needs at least 2 folds")


@dataclass
class AdversaryReport:
    accuracies: dict
    hyperparams: dict = field(default_factory=dict)

    @property
    def privacy_score(self):
        return max(self.accuracies.values())

    def to_json(self, **extra):
        doc = {
            "members": [
                {"member": m, "accuracy": a, "hyperparams": self.hyperparams.get(m, {})}
                for m, a in self.accuracies.items()
            ],
            "privacy_score": self.privacy_score,
        }
        doc.update(extra)
        return json.dumps(doc, indent=2, sort_keys=True)


def _labels(s):
    s = np.asarray(s)
    if s.ndim == 2:
        s = s.argmax(axis=1)
    return s.astype(int)


class _Scaler:
    def __init__(self, Z):
        self.mean = Z.mean(axis=1, keepdims=True)
        std = Z.std(axis=1, keepdims=True)
        std[std == 0] = 1.0
        self.std = std

    def __call__(self, Z):
        return (Z - self.mean) / self.std


class KernelRidgeClassifier:
    """One-vs-rest kernel ridge regression on one-hot targets with a Gaussian kernel."""

    def __init__(self, bandwidth, ridge, classes):
        self.bandwidth = bandwidth
        self.ridge = ridge
        self.classes = classes

    def fit(self, Z, s):
        T = (s[:, None] == self.classes[None, :]).astype(float)
        self.offset = T.mean(axis=0)
        K = kernel_matrix(Z, Z, KernelSpec(bandwidths=(self.bandwidth,)))
        K[np.diag_indices_from(K)] += self.ridge
        self.alpha = sla.solve(K, T - self.offset, assume_a="pos")
        self.Z = Z
        return self

    def predict(self, Z):
        K = kernel_matrix(Z, self.Z, KernelSpec(bandwidths=(self.bandwidth,)))
        return self.classes[np.argmax(K @ self.alpha + self.offset, axis=1)]


def _median_distance(Z, rng, limit=1000):
    if Z.shape[1] > limit:
        Z = Z[:, rng.choice(Z.shape[1], limit, replace=False)]
    sq = (Z * Z).sum(0)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * Z.T @ Z, 0)
    iu = np.triu_indices(Z.shape[1], 1)
    med = float(np.sqrt(np.median(d2[iu])))
    return med if med > 0 else 1.0


def _cv_kernel_ridge(Z, s, folds, cfg, rng):
    """CV accuracy per (bandwidth, ridge), reusing one eigendecomposition per fold."""
    classes = np.unique(s)
    base = _median_distance(Z, rng)
    bandwidths = [base * f for f in cfg.bandwidth_factors]
    scores = np.zeros((len(bandwidths), len(cfg.ridge)))
    for train, val in folds:
        T = (s[train][:, None] == classes[None, :]).astype(float)
        offset = T.mean(axis=0)
        for i, bw in enumerate(bandwidths):
            spec = KernelSpec(bandwidths=(bw,))
            evals, V = np.linalg.eigh(kernel_matrix(Z[:, train], Z[:, train], spec))
            proj = V.T @ (T - offset)
            Kv = kernel_matrix(Z[:, val], Z[:, train], spec) @ V
            for j, r in enumerate(cfg.ridge):
                pred = classes[np.argmax(Kv @ (proj / (evals + r)[:, None]) + offset, axis=1)]
                scores[i, j] += np.mean(pred == s[val])
    i, j = np.unravel_index(np.argmax(scores), scores.shape)
    return {"bandwidth": bandwidths[i], "ridge": cfg.ridge[j]}, scores[i, j] / len(folds)


class MLPAdversary:
    """Softmax classifier with the discriminator's architecture, trained by Adam."""

    def __init__(self, n_classes, cfg):
        self.n_classes = n_classes
        self.cfg = cfg

    def fit(self, Z, s):
        from .trainer import AdamState, adam_step

        cfg = self.cfg
        self.classes = np.unique(s)
        Y = (s[:, None] == self.classes[None, :]).astype(float)
        spec = DiscriminatorSpec(Z.shape[0], len(self.classes), hidden=tuple(cfg.mlp_hidden))
        self.net = build_network(spec, seed=cfg.seed)
        state = AdamState()
        rng = np.random.default_rng(cfg.seed)
        n = Z.shape[1]
        batch = min(cfg.mlp_batch, n)
        for _ in range(cfg.mlp_epochs):
            order = rng.permutation(n)
            for b in range(n // batch):
                idx = order[b * batch : (b + 1) * batch]
                loss = utility_loss(self.net(Z[:, idx]), Y[idx])
                grads = ad.backward(ad.Graph(loss, self.net.parameters))
                adam_step(state, self.net.parameters, grads, cfg.mlp_lr, term="adversary")
        return self

    def predict(self, Z):
        return self.classes[np.argmax(self.net.apply(Z), axis=0)]


@dataclass
class FittedSuite:
    scaler: object
    models: dict
    hyperparams: dict
    cv_scores: dict


def _as_rep(Z):
    if not isinstance(Z, Representation):
        raise TypeError("adversaries accept Representation objects only, not raw data")
    return Z


def fit_adversaries(Z_train, s_train, cfg=AdversarySuiteConfig()):
    """Pick each member's hyperparameters by stratified CV, then refit on all of ``Z_train``."""
    Z = _as_rep(Z_train).Z
    s = _labels(s_train)
    if s.shape[0] != Z.shape[1]:
        raise ContractError("label count does not match the representation")
    classes, counts = np.unique(s, return_counts=True)
    if len(classes) < 2:
        raise ContractError("adversaries need at least two classes in the training labels")
    scaler = _Scaler(Z)
    Zs = scaler(Z)
    rng = np.random.default_rng(cfg.seed)
    n_folds = max(2, min(cfg.folds, int(counts.min())))
    skf = StratifiedKFold(n_splits=n_folds, shuffle=True, random_state=cfg.seed)
    folds = list(skf.split(np.zeros(len(s)), s))
    models, hyper, cv = {}, {}, {}

    for member in cfg.members:
        if member == "linear":
            def make(c):
                return LogisticRegression(C=c, max_iter=2000)
            best = _grid_cv(Zs, s, folds, cfg.logistic_c, make)
            hyper[member], cv[member] = {"C": best[0]}, best[1]
            models[member] = make(best[0]).fit(Zs.T, s)
        elif member == "knn":
            def make(k):
                return KNeighborsClassifier(n_neighbors=k)
            ks = [k for k in cfg.k_values if k <= min(len(f[0]) for f in folds)]
            best = _grid_cv(Zs, s, folds, ks, make)
            hyper[member], cv[member] = {"k": best[0]}, best[1]
            models[member] = make(best[0]).fit(Zs.T, s)
        elif member == "kernel-ridge":
            Zk, sk = Zs, s
            if cfg.kernel_max_train and Zs.shape[1] > cfg.kernel_max_train:
                keep = np.sort(rng.choice(Zs.shape[1], cfg.kernel_max_train, replace=False))
                Zk, sk = Zs[:, keep], s[keep]
            kfolds = list(StratifiedKFold(n_splits=n_folds, shuffle=True, random_state=cfg.seed)
                          .split(np.zeros(len(sk)), sk))
            params, score = _cv_kernel_ridge(Zk, sk, kfolds, cfg, rng)
            hyper[member], cv[member] = params, score
            models[member] = KernelRidgeClassifier(params["bandwidth"], params["ridge"],
                                                   np.unique(sk)).fit(Zk, sk)
        elif member == "mlp":
            hyper[member] = {"hidden": list(cfg.mlp_hidden), "epochs": cfg.mlp_epochs,
                             "lr": cfg.mlp_lr}
            models[member] = MLPAdversary(len(classes), cfg).fit(Zs, s)
        log.debug("fitted %s: %s", member, hyper.get(member))
    return FittedSuite(scaler, models, hyper, cv)


def _grid_cv(Zs, s, folds, grid, make):
    best_value, best_score = None, -1.0
    for value in grid:
        score = np.mean([
            np.mean(make(value).fit(Zs[:, tr].T, s[tr]).predict(Zs[:, va].T) == s[va])
            for tr, va in folds
        ])
        if score > best_score:
            best_value, best_score = value, score
    return best_value, best_score


def _predict(model, Zs):
    if isinstance(model, (KernelRidgeClassifier, MLPAdversary)):
        return model.predict(Zs)
    return model.predict(Zs.T)


def privacy_score(suite, Z_test, s_test):
    """Per-member test accuracies; the report's ``privacy_score`` is their maximum."""
    Zs = suite.scaler(_as_rep(Z_test).Z)
    s = _labels(s_test)
    acc = {m: float(np.mean(_predict(model, Zs) == s)) for m, model in suite.models.items()}
    return AdversaryReport(acc, dict(suite.hyperparams))


def utility_score(private_sphere, public_sphere, X_test, Y_test):
    """Top-1 accuracy of the public sphere's predictions on released test data."""
    probs = public_sphere.predict_proba(private_sphere.apply(X_test))
    return float(np.mean(probs.argmax(axis=0) == _labels(Y_test)))
