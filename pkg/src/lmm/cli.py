"""Command-line front end: ``lmm {synth,build-hierarchy,train,eval,inspect}``.

Exit codes: 0 success, 1 validation error, 2 runtime failure.

A training run directory looks like::

    RUN/config.json          fully resolved configuration
    RUN/metrics.jsonl        one record per epoch
    RUN/checkpoints/final.npz
    RUN/checkpoints/best.npz
    RUN/reports/
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from .exceptions import LMMError
from .hierarchy import (Hierarchy, HierarchyConfig, build_hierarchy, class_representations,
                        init_psi, permute_groups, psi_to_json, similarity_matrix)
from .lmm_head import theta_from_spec
from .trainer import (TrainConfig, evaluate, fit, load_checkpoint, purity, read_header,
                      reassignments, save_checkpoint)

log = logging.getLogger("lmm")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class ValidationError(Exception):
    def __init__(self, errors):
        self.errors = [errors] if isinstance(errors, str) else list(errors)
        super().__init__("; ".join(self.errors))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _int_list(value):
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    return [int(v) for v in str(value).split(",") if v.strip()]


def _load_config_file(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file {path} not found")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path}: {exc}") from None


def _resolve(args, file_cfg, keys):
    """Explicit flags override config-file values, which override defaults."""
    out = {}
    for key, default in keys.items():
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
        elif key in file_cfg:
            out[key] = file_cfg[key]
        else:
            out[key] = default
    return out


def _dataset(path, fmt=None):
    if path is None:
        raise ValidationError("--data is required")
    if not Path(path).is_file():
        raise ValidationError(f"data file {path} not found")
    return ds.load_features(path, fmt)


# -- synth -------------------------------------------------------------------

SYNTH_KEYS = {"superclusters": 4, "classes_per": 5, "dim": 16, "per_class": 100, "intra": 1.0,
              "inter": 5.0, "noise": None, "seed": 0, "binary": False, "out": None}


def cmd_synth(args):
    cfg = _resolve(args, _load_config_file(args.config), SYNTH_KEYS)
    if cfg["out"] is None:
        raise ValidationError("--out is required")
    spec = ds.SynthSpec(cfg["superclusters"], cfg["classes_per"], cfg["dim"], cfg["intra"],
                        cfg["inter"], cfg["per_class"], cfg["seed"], cfg["noise"])
    try:
        spec.validate()
    except LMMError as exc:
        raise ValidationError(str(exc)) from None
    data, planted = ds.generate_synthetic(spec)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    ds.save_csv(data, out / "data.csv")
    if cfg["binary"]:
        ds.save_binary(data, out / "data.bin")
    _write_json(out / "planted.json", {**planted.to_json(), "num_classes": data.num_classes})
    _write_json(out / "config.json", {"command": "synth", **cfg})
    print(f"wrote {data.size} samples of {data.num_classes} classes to {out}")


# -- build-hierarchy ---------------------------------------------------------

HIER_KEYS = {"data": None, "format": None, "out": None, "levels": 2, "groups": None, "branching": None,
             "linkage": "average", "k": 7, "checkpoint": None, "dump_similarity": False,
             "planted": None, "permute": 0.0, "seed": 0}


def cmd_build_hierarchy(args):
    cfg = _resolve(args, _load_config_file(args.config), HIER_KEYS)
    if cfg["out"] is None:
        raise ValidationError("--out is required")
    out = Path(cfg["out"])
    groups = _int_list(cfg["groups"]) if cfg["groups"] is not None else None
    hcfg = HierarchyConfig(cfg["levels"], tuple(groups) if groups else None, cfg["branching"],
                           cfg["linkage"], cfg["k"])
    extra = {}
    if cfg["planted"] is not None:
        planted = json.loads(Path(cfg["planted"]).read_text())
        grouping = np.asarray(planted["class_to_supercluster"])
        if cfg["levels"] != 2:
            raise ValidationError("--planted builds a two-level hierarchy; use --levels 2")
        moved = []
        if cfg["permute"] > 0:
            grouping, moved = permute_groups(grouping, cfg["permute"], cfg["seed"])
        hierarchy = Hierarchy.from_groupings([grouping])
        extra["permuted_classes"] = moved
    else:
        data = _dataset(cfg["data"], cfg["format"])
        net = None
        if cfg["checkpoint"] is not None:
            state, _ = load_checkpoint(cfg["checkpoint"])
            if state.net.input_dim != data.input_dim:
                raise ValidationError("checkpoint input dimension does not match the dataset")
            net = state.net
        try:
            hcfg.level_sizes(data.num_classes)
            reps = class_representations(data, net)
            sim = similarity_matrix(reps, hcfg)
        except LMMError as exc:
            raise ValidationError(str(exc)) from None
        hierarchy = build_hierarchy(sim, hcfg)
        if cfg["dump_similarity"]:
            out.mkdir(parents=True, exist_ok=True)
            _write_json(out / "similarity.json", {"values": sim.values.tolist(), "sigmas": sim.sigmas.tolist()})
        extra["features"] = "checkpoint" if net is not None else "raw"
    out.mkdir(parents=True, exist_ok=True)
    hierarchy.save(out / "hierarchy.json")
    _write_json(out / "psi_init.json", psi_to_json(init_psi(hierarchy)))
    _write_json(out / "config.json", {"command": "build-hierarchy", **cfg, **extra})
    print(f"hierarchy with level sizes {hierarchy.group_counts()} written to {out}")


# -- train -------------------------------------------------------------------

TRAIN_KEYS = {"data": None, "format": None, "hierarchy": None, "out": None, "test_fraction": 0.25,
              "flat_baseline": False, "theta": "uniform", "no_adapt": False, "no_nonoverlap": False,
              "lr": 0.1, "alpha": 1e-4, "l2_net": False, "batch_size": 32, "warmup": 5,
              "max_epochs": 50, "sweeps": 1, "beta": 1.0, "tol": 1e-4, "patience": 3, "seed": 0,
              "hidden": "", "feature_dim": None, "activation": "relu", "dropout": 0.0}


def train_config_from(cfg):
    return TrainConfig(
        learning_rate=cfg["lr"], l2_alpha=cfg["alpha"], l2_on_net=cfg["l2_net"],
        batch_size=cfg["batch_size"], warmup_epochs=cfg["warmup"], max_epochs=cfg["max_epochs"],
        gibbs_sweeps_per_epoch=cfg["sweeps"], theta="bottom-only" if cfg["flat_baseline"] else cfg["theta"],
        adapt=not (cfg["no_adapt"] or cfg["flat_baseline"]), nonoverlap=not cfg["no_nonoverlap"],
        beta=cfg["beta"], convergence_tol=cfg["tol"], patience=cfg["patience"], seed=cfg["seed"],
        hidden=tuple(_int_list(cfg["hidden"])), feature_dim=cfg["feature_dim"],
        activation=cfg["activation"], dropout_rate=cfg["dropout"])


def cmd_train(args):
    cfg = _resolve(args, _load_config_file(args.config), TRAIN_KEYS)
    errors = []
    if cfg["out"] is None:
        errors.append("--out is required")
    if cfg["data"] is None or not Path(cfg["data"]).is_file():
        errors.append(f"data file {cfg['data']} not found")
    if not cfg["flat_baseline"] and (cfg["hierarchy"] is None or not Path(cfg["hierarchy"]).is_file()):
        errors.append(f"hierarchy file {cfg['hierarchy']} not found (or pass --flat-baseline)")
    if not 0 <= cfg["test_fraction"] < 1:
        errors.append("--test-fraction must lie in [0, 1)")
    try:
        tcfg = train_config_from(cfg)
        errors.extend(tcfg.errors())
    except (ValueError, TypeError) as exc:
        errors.append(str(exc))
    if errors:
        raise ValidationError(errors)

    data = ds.load_features(cfg["data"], cfg["format"])
    if cfg["test_fraction"] > 0:
        train, test = ds.split(data, 1.0 - cfg["test_fraction"], cfg["seed"])
    else:
        train, test = data, None
    if cfg["flat_baseline"]:
        hierarchy = Hierarchy.flat(data.num_classes)
    else:
        hierarchy = Hierarchy.load(cfg["hierarchy"])
        if hierarchy.num_classes != data.num_classes:
            raise ValidationError(f"hierarchy covers {hierarchy.num_classes} classes, "
                                  f"data has {data.num_classes}")
    try:
        theta_from_spec(tcfg.theta, hierarchy.depth)
    except LMMError as exc:
        raise ValidationError(str(exc)) from None

    out = Path(cfg["out"])
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "reports").mkdir(exist_ok=True)
    _write_json(out / "config.json", {"command": "train", **cfg})
    with (out / "metrics.jsonl").open("w") as fh:
        def sink(rec):
            fh.write(json.dumps(rec) + "\n")
            fh.flush()

        result = fit(train, hierarchy, tcfg, test, sink=sink)
    save_checkpoint(out / "checkpoints" / "final.npz", result.state, tcfg)
    save_checkpoint(out / "checkpoints" / "best.npz", result.best_state or result.state, tcfg)
    final = evaluate(result.state, test if test is not None and test.size else train)
    summary = {"final_top1_error": final["top_k_error"][1], "best_epoch": result.best["epoch"],
               "epochs": result.state.epoch, "reassigned": reassignments(result.state)}
    _write_json(out / "reports" / "summary.json", summary)
    print(f"trained {result.state.epoch} epochs; final top-1 error {summary['final_top1_error']:.4f}")


# -- eval --------------------------------------------------------------------

def _checkpoint(path):
    if path is None:
        raise ValidationError("--checkpoint is required")
    if not Path(path).is_file():
        raise ValidationError(f"checkpoint {path} not found")
    try:
        read_header(path)
    except (LMMError, ValueError, OSError) as exc:
        raise ValidationError(f"checkpoint {path}: {exc}") from None
    return load_checkpoint(path)


def cmd_eval(args):
    state, tcfg = _checkpoint(args.checkpoint)
    data = _dataset(args.data, args.format)
    if data.num_classes != state.head.num_classes:
        raise ValidationError(f"checkpoint has {state.head.num_classes} classes, data has {data.num_classes}")
    if args.split != "all":
        seed = args.seed if args.seed is not None else (tcfg.seed if tcfg else 0)
        train, test = ds.split(data, 1.0 - args.test_fraction, seed)
        data = train if args.split == "train" else test
    ks = _int_list(args.ks)
    if any(not 1 <= k for k in ks):
        raise ValidationError("--ks entries must be >= 1")
    m = evaluate(state, data, ks)
    report = {"top_k_error": {str(k): v for k, v in m["top_k_error"].items()},
              "per_class_accuracy": [None if np.isnan(a) else float(a) for a in m["per_class_accuracy"]],
              "mean_loss": m["mean_loss"], "mean_true_confidence": m["mean_true_confidence"],
              "num_samples": data.size}
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)


# -- inspect -----------------------------------------------------------------

def inspect_report(state, planted=None):
    moved = reassignments(state)
    levels = []
    for l in range(1, state.head.num_levels):
        psi = state.head.psis[l - 1]
        psi = psi.toarray() if hasattr(psi, "toarray") else psi
        now = np.argmax(psi, axis=0)
        flagged = {r["class"] for r in moved if r["level"] == l}
        groups = []
        for t in range(psi.shape[0]):
            members = np.flatnonzero(now == t).tolist()
            groups.append({"id": t, "classes": members,
                           "reassigned_in": sorted(c for c in members if c in flagged),
                           "initial": state.hierarchy.groups(l)[t] if t < state.hierarchy.group_counts()[l - 1] else []})
        entry = {"level": l, "groups": groups, "psi": psi.tolist()}
        if l in state.counts:
            entry["omega"] = state.counts[l].omega.tolist()
        if planted is not None:
            entry["purity"] = purity(now, planted)
        levels.append(entry)
    return {"reassigned": moved, "levels": levels}


def cmd_inspect(args):
    state, _ = _checkpoint(args.checkpoint)
    if args.hierarchy is not None:
        h = Hierarchy.load(args.hierarchy)
        if h.num_classes != state.head.num_classes or h.depth != state.head.num_levels:
            raise ValidationError(f"hierarchy (N={h.num_classes}, L={h.depth}) does not match checkpoint "
                                  f"(N={state.head.num_classes}, L={state.head.num_levels})")
        state.hierarchy = h
    planted = None
    if args.planted is not None:
        planted = np.asarray(json.loads(Path(args.planted).read_text())["class_to_supercluster"])
    report = inspect_report(state, planted)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        _write_json(args.out, report)
    if args.json:
        print(json.dumps(report["reassigned"]))
        return
    for entry in report["levels"]:
        print(f"level {entry['level']}" + (f"  purity {entry['purity']:.3f}" if "purity" in entry else ""))
        for g in entry["groups"]:
            marks = " ".join(f"{c}*" if c in g["reassigned_in"] else str(c) for c in g["classes"])
            print(f"  group {g['id']}: {marks}")
    print(f"reassigned classes: {sorted({r['class'] for r in report['reassigned']})}")


# -- parser ------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="lmm", description="Level-wise mixture tree classifier with hierarchy adaptation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--config", help="JSON file of defaults; explicit flags win")

    s = sub.add_parser("synth", help="generate a planted two-level synthetic dataset")
    common(s)
    s.add_argument("--superclusters", type=int)
    s.add_argument("--classes-per", type=int)
    s.add_argument("--dim", type=int)
    s.add_argument("--per-class", type=int)
    s.add_argument("--intra", type=float)
    s.add_argument("--inter", type=float)
    s.add_argument("--noise", type=float)
    s.add_argument("--binary", action="store_true", default=None)
    s.set_defaults(func=cmd_synth, parser=s)

    h = sub.add_parser("build-hierarchy", help="cluster class means into a hierarchy")
    common(h)
    h.add_argument("--data")
    h.add_argument("--format", choices=["csv", "binary"])
    h.add_argument("--levels", type=int)
    h.add_argument("--groups", help="comma-separated group counts for the non-bottom levels")
    h.add_argument("--branching", type=float)
    h.add_argument("--linkage", choices=["average", "complete"])
    h.add_argument("--k", type=int, help="neighbour rank for the self-tuned bandwidth")
    h.add_argument("--checkpoint", help="compute class means from this checkpoint's features")
    h.add_argument("--dump-similarity", action="store_true", default=None)
    h.add_argument("--planted", help="use a planted grouping instead of clustering")
    h.add_argument("--permute", type=float, help="fraction of classes to mis-assign (with --planted)")
    h.set_defaults(func=cmd_build_hierarchy, parser=h)

    t = sub.add_parser("train", help="train the mixture classifier")
    common(t)
    t.add_argument("--data")
    t.add_argument("--format", choices=["csv", "binary"])
    t.add_argument("--hierarchy")
    t.add_argument("--test-fraction", type=float)
    t.add_argument("--flat-baseline", action="store_true", default=None)
    t.add_argument("--theta", help="uniform, bottom-only, or comma-separated weights")
    t.add_argument("--no-adapt", action="store_true", default=None)
    t.add_argument("--no-nonoverlap", action="store_true", default=None)
    t.add_argument("--lr", type=float)
    t.add_argument("--alpha", type=float)
    t.add_argument("--l2-net", action="store_true", default=None)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--warmup", type=int)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--sweeps", type=int)
    t.add_argument("--beta", type=float)
    t.add_argument("--tol", type=float)
    t.add_argument("--patience", type=int)
    t.add_argument("--hidden", help="comma-separated hidden layer sizes")
    t.add_argument("--feature-dim", type=int)
    t.add_argument("--activation", choices=["relu", "tanh", "identity"])
    t.add_argument("--dropout", type=float)
    t.set_defaults(func=cmd_train, parser=t)

    e = sub.add_parser("eval", help="top-k errors of a checkpoint")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--format", choices=["csv", "binary"])
    e.add_argument("--ks", default="1,5")
    e.add_argument("--split", choices=["all", "train", "test"], default="all")
    e.add_argument("--test-fraction", type=float, default=0.25)
    e.set_defaults(func=cmd_eval, parser=e)

    i = sub.add_parser("inspect", help="group memberships and reassigned classes")
    common(i)
    i.add_argument("--checkpoint")
    i.add_argument("--hierarchy", help="compare against this pre-trained hierarchy")
    i.add_argument("--planted", help="planted.json for purity reporting")
    i.add_argument("--json", action="store_true", help="print only the reassignment list as JSON")
    i.set_defaults(func=cmd_inspect, parser=i)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ValidationError as exc:
        for err in exc.errors:
            print(f"error: {err}", file=sys.stderr)
        args.parser.print_usage(sys.stderr)
        return EXIT_VALIDATION
    except (ds.ParseError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
