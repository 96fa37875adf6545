"""Joint minibatch training of the private sphere, public sphere and discriminator.

Each minibatch runs three updates in order: the private sphere on
``L_U + lam_p * L_P (+ ortho_weight * L_O)``, the public sphere on ``L_U``
with the representation held fixed, and (WDN/LSDN only) the discriminator
on its own loss.  Every update recomputes its loss from the current weights.
"""

import csv
import dataclasses
import hashlib
import io
import json
import logging
import zipfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import objectives as obj
from .adversary import (AdversarySuiteConfig, fit_adversaries, privacy_score, release,
                        utility_score)
from .data import TradeoffPoint
from .errors import ContractError, NumericError
from .kernels import KernelSpec
from .networks import DiscriminatorSpec, PrivateSphereSpec, PublicSphereSpec, build_network
from .objectives import PrivacyObjectiveKind

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
HISTORY_COLUMNS = ("epoch", "batch", "L_U", "L_P", "L_Disc", "L_O")

DEFAULT_GRIDS = {
    PrivacyObjectiveKind.MMD: (-10, 10),
    PrivacyObjectiveKind.WDN: (-10, 10),
    PrivacyObjectiveKind.KDI: (-10, 0),
    PrivacyObjectiveKind.LSDN: (-4, 12),
}


def default_grid(objective, step=1):
    """Powers of two spanning the usual range for ``objective``, ascending."""
    lo, hi = DEFAULT_GRIDS[PrivacyObjectiveKind(objective)]
    exps = list(range(lo, hi + 1, step))
    if exps[-1] != hi:
        exps.append(hi)
    return [2.0**e for e in exps]


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings for one training run.

    ``lr`` defaults to 1e-3 for MMD/KDI and 1e-4 for WDN/LSDN.  ``epochs`` is
    the fixed schedule for WDN/LSDN (default 250) and an upper bound for
    MMD/KDI, which otherwise stop once ``L_U + lam_p * L_P`` has stopped
    improving (relative change below ``tol`` for ``patience`` epochs) after
    ``max_decays`` learning-rate decays.  ``lr_disc = 0`` freezes the
    discriminator.
    """

    objective: PrivacyObjectiveKind
    lam_p: float = 0.0
    lam_r: float = 10.0
    rho: float = 1e-4
    lr: float = None
    lr_disc: float = 1e-3
    batch_size: int = 500
    epochs: int = None
    milestones: tuple = None
    lr_decay: float = 0.1
    tol: float = 1e-4
    patience: int = 10
    max_decays: int = 2
    ortho_weight: float = obj.ORTHO_WEIGHT
    kernel: KernelSpec = KernelSpec()
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        kind = PrivacyObjectiveKind(self.objective)
        object.__setattr__(self, "objective", kind)
        if isinstance(self.kernel, dict):
            object.__setattr__(self, "kernel", KernelSpec(**self.kernel))
        if self.lr is None:
            object.__setattr__(self, "lr", 1e-4 if kind.requires_discriminator else 1e-3)
        if self.epochs is None:
            object.__setattr__(self, "epochs", 250 if kind.requires_discriminator else 400)
        if self.milestones is None:
            ms = (int(0.6 * self.epochs), int(0.8 * self.epochs)) if kind.requires_discriminator else ()
            object.__setattr__(self, "milestones", ms)
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.lam_p < 0:
            raise ContractError("lam_p must be non-negative")
        if self.lam_r < 0:
            raise ContractError("lam_r must be non-negative")
        if not self.rho > 0:
            raise ContractError("rho must be positive")
        if not self.lr > 0:
            raise ContractError("learning rate must be positive")
        if self.lr_disc < 0:
            raise ContractError("discriminator learning rate must be non-negative")
        if kind.requires_discriminator and 0 < self.lr_disc < self.lr:
            raise ContractError("the discriminator must not learn slower than the private sphere")
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ContractError("batch_size, epochs and patience must be positive")
        if not 0 < self.lr_decay < 1:
            raise ContractError("lr_decay must be in (0, 1)")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["objective"] = self.objective.value
        d["milestones"] = list(self.milestones)
        d["kernel"]["bandwidths"] = list(self.kernel.bandwidths)
        return d

    def config_hash(self):
        return config_hash(self.to_dict())


def config_hash(doc):
    """Short sha256 of the canonical JSON encoding of ``doc``."""
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, parameters, grads, rate, term="loss"):
    """One bias-corrected Adam update of ``parameters`` in place.

    ``grads`` maps parameter id to gradient; parameters without an entry get
    a zero gradient.  A non-finite gradient aborts before anything changes.
    """
    parameters = list(parameters)
    for p in parameters:
        g = grads.get(p.id)
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient of {term} w.r.t. {p.name or p.id}")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p in parameters:
        g = grads.get(p.id)
        if g is None:
            g = np.zeros_like(p.value)
        m = state.m.get(p.id)
        if m is None:
            m = np.zeros_like(p.value)
            state.v[p.id] = np.zeros_like(p.value)
        if m.shape != p.value.shape:
            raise ContractError(f"optimizer state shape mismatch for {p.name}")
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * state.v[p.id] + (1 - state.beta2) * g * g
        state.m[p.id], state.v[p.id] = m, v
        if rate > 0:
            p.value = p.value - rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


@dataclass
class Specs:
    private: PrivateSphereSpec
    public: PublicSphereSpec
    discriminator: DiscriminatorSpec = None


def default_specs(dataset, funnel_dim, funnel="relu-affine", public_hidden=(500,),
                  disc_hidden=(1024,), private_hidden=()):
    d = dataset.X.shape[0]
    return Specs(
        PrivateSphereSpec(d, funnel_dim, funnel=funnel, hidden=tuple(private_hidden)),
        PublicSphereSpec(funnel_dim, dataset.Y.shape[1], hidden=tuple(public_hidden)),
        DiscriminatorSpec(funnel_dim, dataset.P.shape[1], hidden=tuple(disc_hidden)),
    )


@dataclass
class TrainResult:
    private: object
    public: object
    discriminator: object
    history: np.ndarray
    config: TrainConfig
    epochs_run: int
    decays: int

    def write_history(self, path):
        write_history(self.history, path)


def _privacy_loss(cfg, Z, P, disc):
    kind = cfg.objective
    if kind is PrivacyObjectiveKind.MMD:
        return obj.privacy_loss_mmd(Z, P, cfg.kernel)
    if kind is PrivacyObjectiveKind.KDI:
        return obj.privacy_loss_kdi(Z, P, cfg.kernel, cfg.rho)
    if kind is PrivacyObjectiveKind.WDN:
        return obj.privacy_loss_wdn(Z, P, disc)
    return obj.privacy_loss_lsdn(Z, P, disc)


def _disc_loss(cfg, Z, P, disc):
    if cfg.objective is PrivacyObjectiveKind.WDN:
        return obj.disc_loss_wdn(Z, P, disc, cfg.lam_r)
    return obj.disc_loss_lsdn(Z, P, disc)


def _scalar(node):
    return float(np.asarray(node.value).reshape(-1)[0])


def train(dataset, specs, cfg):
    """Run the joint optimisation; returns a :class:`TrainResult`.

    The history has one row per minibatch with the columns of
    ``HISTORY_COLUMNS``; ``L_P`` and ``L_O`` are recorded as evaluated in the
    private-sphere step, ``L_U`` in the public-sphere step.
    """
    n = dataset.n_samples
    if cfg.batch_size > n:
        raise ContractError(f"batch_size {cfg.batch_size} exceeds the {n} training samples")
    kind = cfg.objective
    if kind.requires_discriminator and specs.discriminator is None:
        raise ContractError(f"{kind.value} needs a discriminator spec")
    seeds = np.random.SeedSequence(cfg.seed).generate_state(4)
    private = build_network(specs.private, seed=int(seeds[0]))
    public = build_network(specs.public, seed=int(seeds[1]))
    disc = build_network(specs.discriminator, seed=int(seeds[2])) if kind.requires_discriminator else None
    rng = np.random.default_rng(int(seeds[3]))

    def adam():
        return AdamState(cfg.beta1, cfg.beta2, cfg.adam_eps)

    opt_p, opt_u, opt_d = adam(), adam(), adam()
    lr, lr_d = cfg.lr, cfg.lr_disc
    X, Y, P = dataset.X, dataset.Y, dataset.P
    n_batches = n // cfg.batch_size
    history = []
    best, stall, decays, epoch = np.inf, 0, 0, 0
    for epoch in range(cfg.epochs):
        if kind.requires_discriminator and epoch in cfg.milestones:
            lr *= cfg.lr_decay
            lr_d *= cfg.lr_decay
            decays += 1
        order = rng.permutation(n)
        combined = 0.0
        for b in range(n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            xb, yb, pb = X[:, idx], Y[idx], P[idx]

            # private sphere: utility + privacy (+ orthonormality)
            Z = private(xb)
            l_u = obj.utility_loss(public(Z, frozen=True), yb)
            l_p = _privacy_loss(cfg, Z, pb, disc)
            l_o = obj.orthonormality_penalty(private.funnel.W) if specs.private.orthonormal else None
            total = obj.private_sphere_loss(l_u, l_p, cfg.lam_p, l_o, cfg.ortho_weight)
            grads = ad.backward(ad.Graph(total, private.parameters))
            adam_step(opt_p, private.parameters, grads, lr, term=f"private sphere loss ({kind.value})")
            lp_val = _scalar(l_p)
            combined += _scalar(l_u) + cfg.lam_p * lp_val

            # public sphere: utility only, representation fixed
            Zc = ad.Constant(private.apply(xb))
            l_u = obj.utility_loss(public(Zc), yb)
            grads = ad.backward(ad.Graph(l_u, public.parameters))
            adam_step(opt_u, public.parameters, grads, lr, term="utility loss")

            l_d = np.nan
            if disc is not None:
                loss_d = _disc_loss(cfg, Zc, pb, disc)
                grads = ad.backward(ad.Graph(loss_d, disc.parameters))
                adam_step(opt_d, disc.parameters, grads, lr_d, term=f"discriminator loss ({kind.value})")
                l_d = _scalar(loss_d)

            lo_val = _scalar(l_o) if l_o is not None else 0.0
            row = (epoch, b, _scalar(l_u), lp_val, l_d, lo_val)
            checked = row[2:] if disc is not None else row[2:4] + row[5:]
            if not np.all(np.isfinite(checked)):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}: {row}")
            history.append(row)

        if not kind.requires_discriminator:
            combined /= n_batches
            if best - combined > cfg.tol * max(abs(best), 1e-12) or not np.isfinite(best):
                best, stall = combined, 0
            else:
                stall += 1
            if stall >= cfg.patience:
                if decays >= cfg.max_decays:
                    log.info("converged after %d epochs", epoch + 1)
                    break
                lr *= cfg.lr_decay
                decays += 1
                stall = 0
                best = combined
    return TrainResult(private, public, disc, np.array(history, dtype=float), cfg, epoch + 1, decays)


def write_history(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([int(row[0]), int(row[1]), *("{:.17g}".format(v) for v in row[2:])])


def read_history(path):
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def save_checkpoint(path, result, extra_hash=None):
    """All parameter tensors plus the config hash in one ``.npz`` file."""
    arrays = {}
    for tag, net in (("private", result.private), ("public", result.public),
                     ("discriminator", result.discriminator)):
        if net is None:
            continue
        for name, value in net.state().items():
            arrays[f"{tag}/{name}"] = value
    arrays["__version__"] = np.array(CHECKPOINT_VERSION)
    arrays["__config_hash__"] = np.array(extra_hash or result.config.config_hash())
    arrays["__config__"] = np.array(json.dumps(result.config.to_dict(), sort_keys=True))
    write_npz(path, arrays)


def write_npz(path, arrays):
    """``np.savez`` equivalent with fixed member timestamps, so equal arrays give equal bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for key in sorted(arrays):
            info = zipfile.ZipInfo(f"{key}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arrays[key]), allow_pickle=False)
            zf.writestr(info, buf.getvalue())


def load_checkpoint(path, specs):
    """Rebuild the networks described by ``specs`` with weights from ``path``.

    Returns ``(private, public, discriminator_or_None, config_dict, hash)``.
    """
    with np.load(path, allow_pickle=False) as f:
        data = {k: f[k] for k in f.files}
    if int(data["__version__"]) != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {int(data['__version__'])}")
    nets = []
    for tag, spec in (("private", specs.private), ("public", specs.public),
                      ("discriminator", specs.discriminator)):
        prefix = f"{tag}/"
        state = {k[len(prefix):]: v for k, v in data.items() if k.startswith(prefix)}
        if not state or spec is None:
            nets.append(None)
            continue
        net = build_network(spec)
        net.load_state(state)
        nets.append(net)
    cfg = json.loads(str(data["__config__"]))
    return nets[0], nets[1], nets[2], cfg, str(data["__config_hash__"])


def evaluate(result, train_set, test_set, adv_cfg=AdversarySuiteConfig()):
    """Utility accuracy and adversary report on the test split."""
    suite = fit_adversaries(release(result.private, train_set.X), train_set.privacy_labels, adv_cfg)
    report = privacy_score(suite, release(result.private, test_set.X), test_set.privacy_labels)
    util = utility_score(result.private, result.public, test_set.X, test_set.Y)
    return util, report


def run_point(train_set, test_set, specs, cfg, adv_cfg=AdversarySuiteConfig()):
    """Train at ``cfg`` and evaluate; failures become a point with ``error`` set."""
    try:
        result = train(train_set, specs, cfg)
        util, report = evaluate(result, train_set, test_set, adv_cfg)
        return TradeoffPoint(cfg.lam_p, util, report.privacy_score, report.accuracies, cfg.seed)
    except (ContractError, NumericError, ArithmeticError, ValueError) as exc:
        log.warning("sweep point lam_p=%g failed: %s", cfg.lam_p, exc)
        return TradeoffPoint(cfg.lam_p, float("nan"), float("nan"), {}, cfg.seed,
                             error=f"{type(exc).__name__}: {exc}")


def point_seeds(base_seed, n):
    """Disjoint per-point training seeds derived from ``base_seed``."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(base_seed).spawn(n)]


def sweep(train_set, test_set, specs, base_cfg, grid, adv_cfg=AdversarySuiteConfig(), jobs=1):
    """One independent train + evaluation per ``lam_p`` in ``grid``, in grid order."""
    grid = [float(g) for g in grid]
    if not grid:
        raise ContractError("the lambda grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ContractError("the lambda grid must be strictly ascending")
    seeds = point_seeds(base_cfg.seed, len(grid))
    cfgs = [dataclasses.replace(base_cfg, lam_p=lam, seed=s) for lam, s in zip(grid, seeds)]
    if jobs <= 1 or len(cfgs) == 1:
        return [run_point(train_set, test_set, specs, c, adv_cfg) for c in cfgs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(run_point, train_set, test_set, specs, c, adv_cfg) for c in cfgs]
        return [f.result() for f in futures]
