"""Command-line entry point.

Every command reads a JSON run configuration with the sections ``dataset``,
``model``, ``objective``, ``trainer``, ``adversaries`` and ``output``.  Flags
override individual keys; ``--set section.key=value`` reaches any key.  The
output directory can also come from ``PRIVSPHERE_OUTPUT_DIR``.

Exit codes: 0 on success, 2 on a configuration error, 1 on a runtime failure.
"""

import argparse
import copy
import dataclasses
import datetime
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .adversary import AdversarySuiteConfig, Representation, fit_adversaries, privacy_score
from .data import (SyntheticSpec, gen_synthetic, load_csv, standardize, stratified_split,
                   write_csv, write_results)
from .duca import DucaConfig, duca_projection
from .errors import ConfigError, ContractError, NumericError, SchemaError
from .kernels import KernelSpec, permutation_test
from .networks import DiscriminatorSpec, PrivateSphereSpec, PublicSphereSpec
from .trainer import (Specs, TrainConfig, config_hash, default_grid, evaluate, load_checkpoint,
                      save_checkpoint, sweep, train, write_npz)

log = logging.getLogger("privsphere")

OUTPUT_ENV = "PRIVSPHERE_OUTPUT_DIR"

DEFAULTS = {
    "dataset": {
        "synthetic": None,
        "path": None,
        "features": None,
        "utility": None,
        "privacy": None,
        "test_fraction": 0.2,
        "split_seed": 0,
        "joint_split": False,
        "standardize": True,
    },
    "model": {
        "funnel_dim": 20,
        "funnel": "relu-affine",
        "private_hidden": [],
        "public_hidden": [500],
        "disc_hidden": [1024],
    },
    "objective": {"kind": "mmd", "lambda_p": 1.0, "grid": None},
    "trainer": {},
    "adversaries": {},
    "output": {"dir": "runs", "seed": 0},
}

TRAINER_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"objective", "lam_p", "seed"}
ADVERSARY_KEYS = {f.name for f in dataclasses.fields(AdversarySuiteConfig)}
SYNTH_KEYS = {f.name for f in dataclasses.fields(SyntheticSpec)}
KERNEL_KEYS = {f.name for f in dataclasses.fields(KernelSpec)}


# ----------------------------------------------------------------------------
# configuration


def _check_keys(section, doc, allowed):
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"unknown key {section}.{key}", key=f"{section}.{key}")


def load_config(path=None, overrides=()):
    """Merge a config file and ``overrides`` (``(dotted_key, value)`` pairs) onto the defaults."""
    cfg = copy.deepcopy(DEFAULTS)
    doc = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})", key="<file>") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}", key="<file>") from exc
    if not isinstance(doc, dict):
        raise ConfigError("the config file must hold a JSON object", key="<root>")
    _check_keys("<root>", doc, DEFAULTS)
    for section, values in doc.items():
        if not isinstance(values, dict):
            raise ConfigError(f"section {section} must be an object", key=section)
        allowed = {"trainer": TRAINER_KEYS, "adversaries": ADVERSARY_KEYS}.get(section, DEFAULTS[section])
        _check_keys(section, values, allowed)
        cfg[section].update(values)
    for dotted, value in overrides:
        section, _, key = dotted.partition(".")
        if section not in DEFAULTS or not key:
            raise ConfigError(f"unknown key {dotted}", key=dotted)
        allowed = {"trainer": TRAINER_KEYS, "adversaries": ADVERSARY_KEYS}.get(section, DEFAULTS[section])
        _check_keys(section, {key: None}, allowed)
        cfg[section][key] = value
    _validate(cfg)
    return cfg


def _validate(cfg):
    ds = cfg["dataset"]
    if ds["synthetic"] is None and ds["path"] is None:
        raise ConfigError("dataset needs either 'synthetic' or 'path'", key="dataset.path")
    if ds["synthetic"] is not None:
        if not isinstance(ds["synthetic"], dict):
            raise ConfigError("dataset.synthetic must be an object", key="dataset.synthetic")
        _check_keys("dataset.synthetic", ds["synthetic"], SYNTH_KEYS)
    elif not (ds["features"] and ds["utility"] and ds["privacy"]):
        key = next(k for k in ("features", "utility", "privacy") if not ds[k])
        raise ConfigError(f"CSV datasets need dataset.{key}", key=f"dataset.{key}")
    kernel = cfg["trainer"].get("kernel")
    if kernel is not None:
        if not isinstance(kernel, dict):
            raise ConfigError("trainer.kernel must be an object", key="trainer.kernel")
        _check_keys("trainer.kernel", kernel, KERNEL_KEYS)
    grid = cfg["objective"]["grid"]
    if grid is not None and not (isinstance(grid, list) and grid):
        raise ConfigError("objective.grid must be a non-empty list", key="objective.grid")


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _hashable(cfg):
    doc = copy.deepcopy(cfg)
    doc["output"].pop("dir", None)
    return doc


def build_train_config(cfg, lam_p=None, seed=None):
    tr = dict(cfg["trainer"])
    if "kernel" in tr:
        tr["kernel"] = KernelSpec(**{k: tuple(v) if isinstance(v, list) else v
                                     for k, v in tr["kernel"].items()})
    if "milestones" in tr and tr["milestones"] is not None:
        tr["milestones"] = tuple(tr["milestones"])
    lam = cfg["objective"]["lambda_p"] if lam_p is None else lam_p
    try:
        return TrainConfig(objective=cfg["objective"]["kind"], lam_p=float(lam),
                           seed=cfg["output"]["seed"] if seed is None else seed, **tr)
    except ValueError as exc:
        if isinstance(exc, ContractError) or "PrivacyObjectiveKind" in str(exc):
            raise ConfigError(str(exc), key="objective/trainer") from exc
        raise


def build_adversary_config(cfg):
    adv = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg["adversaries"].items()}
    adv.setdefault("seed", cfg["output"]["seed"])
    try:
        return AdversarySuiteConfig(**adv)
    except ContractError as exc:
        raise ConfigError(str(exc), key="adversaries") from exc


def build_specs(cfg, ds):
    m = cfg["model"]
    d, cu, L = ds.X.shape[0], ds.Y.shape[1], ds.P.shape[1]
    try:
        return Specs(
            PrivateSphereSpec(d, m["funnel_dim"], funnel=m["funnel"], hidden=tuple(m["private_hidden"])),
            PublicSphereSpec(m["funnel_dim"], cu, hidden=tuple(m["public_hidden"])),
            DiscriminatorSpec(m["funnel_dim"], L, hidden=tuple(m["disc_hidden"])),
        )
    except ContractError as exc:
        raise ConfigError(str(exc), key="model") from exc


def load_dataset(cfg):
    ds = cfg["dataset"]
    if ds["synthetic"] is not None:
        try:
            return gen_synthetic(SyntheticSpec(**ds["synthetic"]))
        except ContractError as exc:
            raise ConfigError(str(exc), key="dataset.synthetic") from exc
    return load_csv(ds["path"], ds["features"], ds["utility"], ds["privacy"])


def prepare_splits(cfg):
    ds = load_dataset(cfg)
    opts = cfg["dataset"]
    train_set, test_set = stratified_split(ds, opts["test_fraction"], opts["split_seed"],
                                           joint=opts["joint_split"])
    if opts["standardize"]:
        train_set, test_set, _ = standardize(train_set, test_set)
    return train_set, test_set


# ----------------------------------------------------------------------------
# commands


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sidecar(out_dir, command, chash):
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    with open(os.path.join(out_dir, "run.log"), "a", encoding="utf-8") as fh:
        fh.write(f"{stamp} {command} config_hash={chash} version={__version__}\n")


def cmd_train(cfg, args, out_dir, chash):
    train_set, test_set = prepare_splits(cfg)
    specs = build_specs(cfg, train_set)
    tcfg = build_train_config(cfg)
    result = train(train_set, specs, tcfg)
    save_checkpoint(os.path.join(out_dir, "checkpoint.npz"), result, extra_hash=chash)
    result.write_history(os.path.join(out_dir, "history.csv"))
    _write_json(os.path.join(out_dir, "train.json"), {
        "config_hash": chash, "seed": tcfg.seed, "epochs_run": result.epochs_run,
        "lr_decays": result.decays, "config": _hashable(cfg),
    })
    print(f"trained {tcfg.objective.value} lambda_p={tcfg.lam_p:g} for {result.epochs_run} epochs")


def cmd_sweep(cfg, args, out_dir, chash):
    train_set, test_set = prepare_splits(cfg)
    specs = build_specs(cfg, train_set)
    base = build_train_config(cfg)
    grid = cfg["objective"]["grid"] or default_grid(base.objective)
    points = sweep(train_set, test_set, specs, base, grid, build_adversary_config(cfg), jobs=args.jobs)
    write_results(points, os.path.join(out_dir, "results.csv"),
                  members=list(build_adversary_config(cfg).members), config_hash=chash)
    failed = [p for p in points if p.error]
    _write_json(os.path.join(out_dir, "sweep.json"), {
        "config_hash": chash, "seed": base.seed, "config": _hashable(cfg),
        "failures": [{"lambda_p": p.lam_p, "error": p.error} for p in failed],
    })
    for p in points:
        status = p.error or f"utility={p.utility_acc:.4f} privacy={p.privacy_acc:.4f}"
        print(f"lambda_p={p.lam_p:g}: {status}")
    if failed and len(failed) == len(points):
        raise RuntimeError("every sweep point failed")


def _load_duca(path):
    with np.load(path, allow_pickle=False) as f:
        if "duca/W" not in f.files:
            return None
        return f["duca/W"]


def cmd_eval(cfg, args, out_dir, chash):
    train_set, test_set = prepare_splits(cfg)
    adv_cfg = build_adversary_config(cfg)
    W = _load_duca(args.checkpoint)
    if W is not None:
        Z_train, Z_test = W.T @ train_set.X, W.T @ test_set.X
        # a linear release has no public sphere; score it with the suite on utility labels
        util_suite = fit_adversaries(Representation(Z_train), train_set.utility_labels, adv_cfg)
        utility = privacy_score(util_suite, Representation(Z_test), test_set.utility_labels).privacy_score
        suite = fit_adversaries(Representation(Z_train), train_set.privacy_labels, adv_cfg)
        report = privacy_score(suite, Representation(Z_test), test_set.privacy_labels)
    else:
        specs = build_specs(cfg, train_set)
        private, public, disc, _, _ = load_checkpoint(args.checkpoint, specs)
        result = _Loaded(private, public)
        utility, report = evaluate(result, train_set, test_set, adv_cfg)
    text = report.to_json(utility_score=utility, config_hash=chash, seed=adv_cfg.seed)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text + "\n")
    print(f"utility={utility:.4f} privacy={report.privacy_score:.4f}")


@dataclasses.dataclass
class _Loaded:
    private: object
    public: object


def _binary_labels(ds, positive):
    labels = ds.privacy_labels
    if ds.P.shape[1] == 2 and positive is None:
        return labels
    if positive is None:
        raise ConfigError("privacy labels are not binary; pass --positive-class", key="positive_class")
    if positive not in ds.privacy_classes:
        raise ConfigError(f"unknown privacy class {positive!r}", key="positive_class")
    return (labels == ds.privacy_classes.index(positive)).astype(int)


def cmd_permtest(cfg, args, out_dir, chash):
    train_set, test_set = prepare_splits(cfg)
    data = {"test": test_set, "train": train_set}.get(args.split)
    if data is None:
        data = dataclasses.replace(train_set, X=np.hstack([train_set.X, test_set.X]),
                                   Y=np.vstack([train_set.Y, test_set.Y]),
                                   P=np.vstack([train_set.P, test_set.P]))
    X = data.X
    if args.checkpoint:
        W = _load_duca(args.checkpoint)
        if W is not None:
            X = W.T @ X
        else:
            private, _, _, _, _ = load_checkpoint(args.checkpoint, build_specs(cfg, train_set))
            X = private.apply(X)
    s = _binary_labels(data, args.positive_class)
    tr = cfg["trainer"].get("kernel") or {}
    spec = KernelSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in tr.items()})
    res = permutation_test(X, s, spec, n_perm=args.n_perm, seed=cfg["output"]["seed"])
    _write_json(os.path.join(out_dir, "permtest.json"), {
        "config_hash": chash, "seed": cfg["output"]["seed"], "observed": res.observed,
        "n_perm": args.n_perm, "p_value": res.p_value, "split": args.split,
    })
    print(f"observed={res.observed:.6g} p_value={res.p_value:.6g}")


def cmd_duca(cfg, args, out_dir, chash):
    train_set, _ = prepare_splits(cfg)
    q = args.q if args.q is not None else cfg["model"]["funnel_dim"]
    dcfg = DucaConfig(q=q, lam_p=float(cfg["objective"]["lambda_p"]))
    W, evals = duca_projection(train_set.X, train_set.Y, train_set.P, dcfg)
    write_npz(os.path.join(out_dir, "duca.npz"), {
        "duca/W": W, "duca/eigenvalues": evals,
        "__config_hash__": np.array(chash), "__seed__": np.array(cfg["output"]["seed"]),
    })
    print(f"DUCA projection d={W.shape[0]} -> q={W.shape[1]}, lambda_p={dcfg.lam_p:g}")


def cmd_gen_synth(cfg, args, out_dir, chash):
    ds = load_dataset(cfg)
    path = os.path.join(out_dir, "synthetic.csv")
    write_csv(ds, path)
    _write_json(os.path.join(out_dir, "synthetic.json"), {
        "config_hash": chash, "seed": cfg["output"]["seed"], "n_samples": ds.n_samples,
        "features": list(ds.feature_names), "utility_column": "utility", "privacy_column": "privacy",
    })
    print(f"wrote {ds.n_samples} samples to {path}")


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "permtest": cmd_permtest,
    "duca": cmd_duca,
    "gen-synth": cmd_gen_synth,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="privsphere", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--seed", type=int, help="overrides output.seed")
        p.add_argument("--lambda-p", type=float, help="overrides objective.lambda_p")
        p.add_argument("--objective", help="overrides objective.kind")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override any config key; VALUE is parsed as JSON when possible")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "sweep":
            p.add_argument("--jobs", type=int, default=1, help="parallel grid points")
        if name in ("eval", "permtest"):
            p.add_argument("--checkpoint", required=name == "eval",
                           help="trained checkpoint or DUCA projection")
        if name == "permtest":
            p.add_argument("--n-perm", type=int, default=999)
            p.add_argument("--positive-class", help="privacy class tested against the rest")
            p.add_argument("--split", choices=("test", "train", "all"), default="test",
                           help="which part of the dataset to test")
        if name == "duca":
            p.add_argument("--q", type=int, help="projection dimension (default model.funnel_dim)")
    return parser


def _overrides(args):
    out = []
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}", key=item)
        out.append((key.strip(), _parse_value(value)))
    if os.environ.get(OUTPUT_ENV):
        out.append(("output.dir", os.environ[OUTPUT_ENV]))
    if args.out:
        out.append(("output.dir", args.out))
    if args.seed is not None:
        out.append(("output.seed", args.seed))
    if args.lambda_p is not None:
        out.append(("objective.lambda_p", args.lambda_p))
    if args.objective:
        out.append(("objective.kind", args.objective))
    return out


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        chash = config_hash(_hashable(cfg))
        out_dir = cfg["output"]["dir"]
        os.makedirs(out_dir, exist_ok=True)
        COMMANDS[args.command](cfg, args, out_dir, chash)
        _sidecar(out_dir, args.command, chash)
    except ConfigError as exc:
        print(f"config error [{exc.key}]: {exc}", file=sys.stderr)
        return 2
    except (ContractError, NumericError, SchemaError, OSError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
