"""Datasets: CSV ingestion, stratified splits, standardisation, synthetic data,
and the trade-off results file.

A :class:`Dataset` stores features as ``(d, N)`` and labels one-hot as
``(N, C)``.  Operations return new datasets and never modify their inputs.
"""

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, SchemaError


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    P: np.ndarray
    feature_names: tuple = ()
    utility_classes: tuple = ()
    privacy_classes: tuple = ()
    provenance: str = ""

    def __post_init__(self):
        n = self.X.shape[1]
        if self.Y.shape[0] != n or self.P.shape[0] != n:
            raise ContractError(
                f"inconsistent sample counts: X {self.X.shape}, Y {self.Y.shape}, P {self.P.shape}"
            )
        for name, M in (("Y", self.Y), ("P", self.P)):
            if n and not np.allclose(M.sum(axis=1), 1.0):
                raise ContractError(f"{name} rows must be one-hot")

    @property
    def n_samples(self):
        return self.X.shape[1]

    @property
    def utility_labels(self):
        return self.Y.argmax(axis=1)

    @property
    def privacy_labels(self):
        return self.P.argmax(axis=1)

    def subset(self, idx):
        idx = np.asarray(idx)
        return replace(self, X=self.X[:, idx].copy(), Y=self.Y[idx].copy(), P=self.P[idx].copy())


def one_hot(labels, classes):
    index = {c: i for i, c in enumerate(classes)}
    M = np.zeros((len(labels), len(classes)))
    M[np.arange(len(labels)), [index[v] for v in labels]] = 1.0
    return M


def load_csv(path, feature_cols, utility_col, privacy_col):
    """Read a headed CSV into a :class:`Dataset`.

    Class indices follow the sorted order of the label strings.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: file is empty") from None
        columns = {name.strip(): i for i, name in enumerate(header)}
        for col in [*feature_cols, utility_col, privacy_col]:
            if col not in columns:
                raise SchemaError(f"{path}: missing column {col!r}")
        f_idx = [columns[c] for c in feature_cols]
        feats, util, priv = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                feats.append([float(row[i]) for i in f_idx])
            except ValueError as exc:
                raise SchemaError(f"{path}: row {lineno}: non-numeric feature ({exc})") from None
            util.append(row[columns[utility_col]].strip())
            priv.append(row[columns[privacy_col]].strip())
    if not feats:
        raise SchemaError(f"{path}: no data rows")
    u_classes = tuple(sorted(set(util)))
    p_classes = tuple(sorted(set(priv)))
    return Dataset(
        X=np.array(feats).T,
        Y=one_hot(util, u_classes),
        P=one_hot(priv, p_classes),
        feature_names=tuple(feature_cols),
        utility_classes=u_classes,
        privacy_classes=p_classes,
        provenance=str(path),
    )


def write_csv(ds, path, utility_col="utility", privacy_col="privacy"):
    """Write ``ds`` in the format :func:`load_csv` reads."""
    names = list(ds.feature_names) or [f"f{i}" for i in range(ds.X.shape[0])]
    u_names = list(ds.utility_classes) or [str(i) for i in range(ds.Y.shape[1])]
    p_names = list(ds.privacy_classes) or [str(i) for i in range(ds.P.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*names, utility_col, privacy_col])
        for i in range(ds.n_samples):
            w.writerow([*(repr(float(v)) for v in ds.X[:, i]),
                        u_names[ds.utility_labels[i]], p_names[ds.privacy_labels[i]]])
    return names


def stratified_split(ds, test_fraction=0.2, seed=0, joint=False):
    """Split so each privacy class (or utility/privacy pair with ``joint``)
    contributes ``round(test_fraction * n_class)`` samples to the test set."""
    if not 0 < test_fraction < 1:
        raise ContractError("test_fraction must be in (0, 1)")
    keys = ds.privacy_labels
    if joint:
        keys = keys * ds.Y.shape[1] + ds.utility_labels
    rng = np.random.default_rng(seed)
    test_idx, bad = [], []
    for key in np.unique(keys):
        members = np.flatnonzero(keys == key)
        if len(members) < 2:
            bad.append(int(key))
            continue
        n_test = min(max(int(round(test_fraction * len(members))), 1), len(members) - 1)
        test_idx.extend(rng.permutation(members)[:n_test])
    if bad:
        raise ContractError(f"strata with fewer than 2 samples: {bad}")
    test_idx = np.sort(np.array(test_idx, dtype=int))
    train_idx = np.setdiff1d(np.arange(ds.n_samples), test_idx)
    return ds.subset(train_idx), ds.subset(test_idx)


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    def transform(self, X):
        return (X - self.mean) / self.scale

    def inverse(self, X):
        return X * self.scale + self.mean


def standardize(train, test):
    """Zero-mean, unit-variance features using training statistics only.

    Constant features are left exactly as they are.
    """
    if train.n_samples == 0:
        raise ContractError("cannot standardize an empty training set")
    mean = train.X.mean(axis=1, keepdims=True)
    std = train.X.std(axis=1, keepdims=True)
    constant = std[:, 0] == 0
    mean[constant] = 0.0
    std[constant] = 1.0
    tr = Standardizer(mean, std)
    return replace(train, X=tr.transform(train.X)), replace(test, X=tr.transform(test.X)), tr


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator for data with a utility subspace and a privacy subspace.

    Utility classes sit at ``+-utility_scale`` along the axes of the utility
    subspace.  With ``encoding="linear"`` privacy classes are offsets at the
    vertices of a ``+-privacy_scale`` hypercube in the privacy subspace; with
    ``"sign-symmetric"`` class ``l`` sits at ``+-r_l`` (random sign) along its
    own direction in the privacy subspace, so every class mean is zero and only
    magnitudes carry the label.  ``overlap_angle`` (degrees) is the angle
    between the privacy directions and the utility subspace: 90 means
    orthogonal.  Isotropic Gaussian noise of std ``noise`` is added everywhere.
    """

    d: int = 40
    n_utility: int = 4
    n_privacy: int = 8
    utility_dim: int = 2
    privacy_dim: int = 3
    overlap_angle: float = 90.0
    encoding: str = "linear"
    noise: float = 1.0
    n_samples: int = 2500
    seed: int = 0
    utility_scale: float = 4.0
    privacy_scale: float = 3.0

    def __post_init__(self):
        if self.encoding not in ("linear", "sign-symmetric"):
            raise ContractError(f"unknown privacy encoding {self.encoding!r}")
        if self.utility_dim + self.privacy_dim > self.d:
            raise ContractError("utility and privacy subspaces do not fit in d dimensions")
        if min(self.utility_dim, self.privacy_dim) < 1:
            raise ContractError("subspace dimensions must be positive")
        if self.noise < 0:
            raise ContractError("noise scale must be non-negative")
        if 2 * self.utility_dim < self.n_utility:
            raise ContractError("need utility_dim >= n_utility / 2 for axis-aligned centres")
        if self.encoding == "linear" and 2**self.privacy_dim < self.n_privacy:
            raise ContractError("need 2**privacy_dim >= n_privacy for hypercube offsets")
        if not 0 < self.overlap_angle <= 90:
            raise ContractError("overlap_angle must be in (0, 90]")


def _axis_codes(n, dim, scale):
    codes = np.zeros((n, dim))
    for c in range(n):
        codes[c, c // 2] = scale if c % 2 == 0 else -scale
    return codes


def _cube_codes(n, dim, scale):
    codes = np.zeros((n, dim))
    for c in range(n):
        bits = [(c >> k) & 1 for k in range(dim)]
        codes[c] = [scale if b else -scale for b in bits]
    return codes


def subspace_bases(spec):
    """Orthonormal ``(d, utility_dim)`` and unit-column ``(d, privacy_dim)`` bases."""
    rng = np.random.default_rng([spec.seed, 1])
    Q, _ = np.linalg.qr(rng.standard_normal((spec.d, spec.d)))
    U = Q[:, : spec.utility_dim]
    extra = Q[:, spec.utility_dim : spec.utility_dim + spec.privacy_dim]
    V = extra.copy()
    if spec.overlap_angle < 90:
        a = math.radians(spec.overlap_angle)
        k = min(spec.utility_dim, spec.privacy_dim)
        V[:, :k] = math.cos(a) * U[:, :k] + math.sin(a) * extra[:, :k]
    return U, V


def gen_synthetic(spec):
    rng = np.random.default_rng([spec.seed, 2])
    U, V = subspace_bases(spec)
    n = spec.n_samples
    u = np.arange(n) % spec.n_utility
    s = (np.arange(n) // spec.n_utility) % spec.n_privacy
    perm = rng.permutation(n)
    u, s = u[perm], s[perm]
    X = U @ _axis_codes(spec.n_utility, spec.utility_dim, spec.utility_scale)[u].T
    if spec.encoding == "linear":
        codes = _cube_codes(spec.n_privacy, spec.privacy_dim, spec.privacy_scale)
        X = X + V @ codes[s].T
    else:
        radii = spec.privacy_scale * (1.0 + np.arange(spec.n_privacy))
        dirs = np.zeros((spec.n_privacy, spec.privacy_dim))
        dirs[np.arange(spec.n_privacy), np.arange(spec.n_privacy) % spec.privacy_dim] = 1.0
        signs = rng.choice([-1.0, 1.0], size=n)
        X = X + V @ (dirs[s] * (radii[s] * signs)[:, None]).T
    X = X + spec.noise * rng.standard_normal((spec.d, n))
    return Dataset(
        X=X,
        Y=one_hot(u, range(spec.n_utility)),
        P=one_hot(s, range(spec.n_privacy)),
        feature_names=tuple(f"x{i}" for i in range(spec.d)),
        utility_classes=tuple(str(i) for i in range(spec.n_utility)),
        privacy_classes=tuple(str(i) for i in range(spec.n_privacy)),
        provenance=f"synthetic:{spec}",
    )


@dataclass
class TradeoffPoint:
    lam_p: float
    utility_acc: float
    privacy_acc: float
    per_adversary: dict = field(default_factory=dict)
    seed: int = 0
    error: str = None


def write_results(points, path, members=None, config_hash=None):
    """CSV of trade-off points in the given order, 17 significant digits.

    A ``config_hash`` column is appended when a hash is supplied.
    """
    points = list(points)
    if not points:
        raise ContractError("no trade-off points to write")
    if members is None:
        members = []
        for pt in points:
            members.extend(m for m in pt.per_adversary if m not in members)
    header = ["lambda_p", "utility_acc", "privacy_acc", *(f"{m}_acc" for m in members), "seed"]
    if config_hash is not None:
        header.append("config_hash")
    fmt = "{:.17g}".format
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for pt in points:
            row = [fmt(pt.lam_p), fmt(pt.utility_acc), fmt(pt.privacy_acc)]
            row += [fmt(pt.per_adversary.get(m, float("nan"))) for m in members]
            row.append(str(pt.seed))
            if config_hash is not None:
                row.append(config_hash)
            w.writerow(row)


def read_results(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    points = []
    for row in rows:
        per = {k[:-4]: float(v) for k, v in row.items()
               if k.endswith("_acc") and k not in ("utility_acc", "privacy_acc")}
        points.append(TradeoffPoint(
            lam_p=float(row["lambda_p"]),
            utility_acc=float(row["utility_acc"]),
            privacy_acc=float(row["privacy_acc"]),
            per_adversary=per,
            seed=int(row["seed"]),
        ))
    return points
