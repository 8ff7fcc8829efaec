"""Joint training loop: warm-up SGD, then Gibbs adaptation interleaved with SGD.

Randomness is drawn from named sub-streams of ``config.seed`` keyed by epoch
(and level/sweep for Gibbs), so resuming from a checkpoint reproduces the
uninterrupted run exactly.
"""
import io
import json
import logging
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import adaptation
from .exceptions import InvalidInputError, NonFiniteError
from .feature_net import DenseLayer, FeatureNet, init_feature_net
from .hierarchy import Hierarchy, init_psi
from .lmm_head import LevelClassifier, LMMHead, forward_level, init_head, l2_penalty, loss, predict_topk
from .numerics import sub_stream

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "lmm-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    l2_alpha: float = 1e-4
    l2_on_net: bool = False
    batch_size: int = 32
    warmup_epochs: int = 5
    max_epochs: int = 50
    gibbs_sweeps_per_epoch: int = 1
    theta: object = "uniform"
    adapt: bool = True
    nonoverlap: bool = True
    beta: float = 1.0
    convergence_tol: float = 1e-4
    patience: int = 3
    seed: int = 0
    hidden: tuple = ()
    feature_dim: int = None
    activation: str = "relu"
    dropout_rate: float = 0.0
    eval_ks: tuple = (1, 5)

    def errors(self):
        errs = []
        if not self.learning_rate > 0:
            errs.append("learning_rate must be > 0")
        if self.l2_alpha < 0:
            errs.append("l2_alpha must be >= 0")
        if self.batch_size < 1:
            errs.append("batch_size must be >= 1")
        if self.warmup_epochs < 0:
            errs.append("warmup_epochs must be >= 0")
        if self.max_epochs < self.warmup_epochs:
            errs.append("max_epochs must be >= warmup_epochs")
        if self.gibbs_sweeps_per_epoch < 0:
            errs.append("gibbs_sweeps_per_epoch must be >= 0")
        if not self.convergence_tol > 0:
            errs.append("convergence_tol must be > 0")
        if self.patience < 1:
            errs.append("patience must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            errs.append("dropout_rate must lie in [0, 1)")
        if np.any(np.asarray(self.beta, dtype=float) <= 0):
            errs.append("beta must be > 0")
        return errs

    def validate(self):
        errs = self.errors()
        if errs:
            raise InvalidInputError("; ".join(errs))

    def to_json(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["eval_ks"] = list(self.eval_ks)
        if isinstance(self.theta, np.ndarray):
            d["theta"] = self.theta.tolist()
        return d

    @classmethod
    def from_json(cls, data):
        data = dict(data)
        for key in ("hidden", "eval_ks"):
            if key in data and data[key] is not None:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass
class TrainState:
    net: FeatureNet
    head: LMMHead
    hierarchy: Hierarchy  # the pre-trained hierarchy the run started from
    epoch: int = 0
    counts: dict = field(default_factory=dict)  # level -> CountMatrix
    history: list = field(default_factory=list)  # one metrics record per epoch

    @property
    def losses(self):
        return [r["loss"] for r in self.history]


def _head_rng(seed, level, n_groups, is_bottom):
    # keyed so the bottom classifier starts identically whatever the depth
    if is_bottom:
        return sub_stream(seed, "head", "bottom", n_groups)
    return sub_stream(seed, "head", level, n_groups)


def init_state(input_dim, hierarchy, config):
    config.validate()
    net = init_feature_net(input_dim, config.hidden, config.feature_dim, config.activation,
                           dropout_rate=config.dropout_rate, rng=sub_stream(config.seed, "net"))
    counts = hierarchy.group_counts()
    depth = len(counts)
    head = init_head(counts, net.feature_dim, config.theta, init_psi(hierarchy),
                     lambda l, k: _head_rng(config.seed, l, k, l == depth))
    return TrainState(net, head, hierarchy)


def adapted_levels(state):
    """Non-bottom levels whose Psi is adapted (1-based)."""
    return list(range(1, state.head.num_levels))


# -- one SGD pass ------------------------------------------------------------

def sgd_epoch(state, data, config, epoch):
    """One shuffled minibatch pass; returns the epoch-mean training loss."""
    n = data.size
    order = sub_stream(config.seed, "shuffle", epoch).permutation(n)
    dropout_rng = sub_stream(config.seed, "dropout", epoch)
    net, head = state.net, state.head
    total = 0.0
    for start in range(0, n, config.batch_size):
        idx = order[start:start + config.batch_size]
        y = data.labels[idx]
        feats, trace = net.forward(data.inputs[idx], mode="train", rng=dropout_rng)
        pred = head.forward(feats)
        batch_loss = loss(pred.z, y)
        if not np.all(np.isfinite(batch_loss)):
            raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch starting {start}")
        total += float(batch_loss.sum())
        grad_w, grad_b, grad_x = head.backward(pred, y, feats)
        net_grads, _ = net.backward(trace, grad_x)
        if config.l2_alpha > 0:
            _, reg = l2_penalty(head.weights(), config.l2_alpha)
            grad_w = [g + r for g, r in zip(grad_w, reg)]
            if config.l2_on_net:
                net_grads = [(gw + config.l2_alpha * layer.weight, gb)
                             for (gw, gb), layer in zip(net_grads, net.layers)]
        for l, (clf, gw, gb) in enumerate(zip(head.classifiers, grad_w, grad_b), start=1):
            if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
                raise NonFiniteError(f"non-finite gradient in level-{l} classifier at epoch {epoch}")
            clf.weight -= config.learning_rate * gw
            clf.bias -= config.learning_rate * gb
        net.sgd_step(net_grads, config.learning_rate)
    return total / n


def features(net, inputs, batch_size=4096):
    if len(inputs) == 0:
        return np.zeros((0, net.feature_dim))
    return np.concatenate([net.forward(inputs[s:s + batch_size], mode="eval")[0]
                           for s in range(0, len(inputs), batch_size)])


# -- Algorithm phases --------------------------------------------------------

def warmup(state, data, config, evaluate_on=None, sink=None):
    """Run SGD epochs with Psi frozen until ``config.warmup_epochs`` are done."""
    while state.epoch < config.warmup_epochs:
        train_loss = sgd_epoch(state, data, config, state.epoch)
        _record(state, "warmup", train_loss, 0, evaluate_on or data, config, sink)
    return state


def init_adaptation(state, data):
    state.counts = {l: adaptation.init_counts(data.labels, state.hierarchy, l)
                    for l in adapted_levels(state)}
    return state


def gibbs_phase(state, data, config, epoch):
    """Resample group labels, re-estimate Psi and publish it to the head.

    Returns the number of label moves.
    """
    if config.gibbs_sweeps_per_epoch == 0 or not state.counts:
        return 0
    beta = adaptation.make_prior(data.num_classes, config.beta)
    feats = features(state.net, data.inputs)
    new_psis = list(state.head.psis)
    moves = 0
    for level, counts in sorted(state.counts.items()):
        clf = state.head.classifiers[level - 1]
        probs = forward_level(clf, feats)
        for sweep in range(config.gibbs_sweeps_per_epoch):
            rng = sub_stream(config.seed, "gibbs", epoch, level, sweep)
            moves += adaptation.gibbs_sweep(counts, data.labels, probs, beta, rng)
        new_psis[level - 1] = adaptation.estimate_psi(counts.omega, beta)
    if config.nonoverlap:
        levels = sorted(state.counts)
        pruned, _ = adaptation.apply_nonoverlap([new_psis[l - 1] for l in levels])
        for l, p in zip(levels, pruned):
            new_psis[l - 1] = p
    state.head.set_psis(new_psis)
    return moves


def adapt_and_train_epoch(state, data, config, evaluate_on=None, sink=None):
    epoch = state.epoch
    moves = gibbs_phase(state, data, config, epoch) if config.adapt else 0
    train_loss = sgd_epoch(state, data, config, epoch)
    _record(state, "adapt", train_loss, moves, evaluate_on or data, config, sink)
    return state


def check_convergence(losses, config):
    """True when training should stop.

    Stops once the relative epoch-mean loss improvement has been at most
    ``convergence_tol`` for ``patience`` consecutive epochs, or when
    ``max_epochs`` epochs have run.
    """
    losses = list(losses)
    if not losses:
        raise InvalidInputError("need at least one recorded epoch")
    if len(losses) >= config.max_epochs:
        return True
    stale = 0
    for prev, cur in zip(losses[:-1], losses[1:]):
        rel = (prev - cur) / max(abs(prev), 1e-300)
        # boundary counts as stale; slack absorbs float error in the ratio
        stale = stale + 1 if rel <= config.convergence_tol + 1e-12 else 0
    return stale >= config.patience


# -- evaluation --------------------------------------------------------------

def predict(state, inputs):
    return state.head.forward(features(state.net, inputs))


def evaluate(state, data, ks=(1, 5)):
    if data.size == 0:
        raise InvalidInputError("cannot evaluate on an empty dataset")
    pred = predict(state, data.inputs)
    return metrics_from_z(pred.z, data.labels, ks)


def metrics_from_z(z, y, ks=(1, 5)):
    z = np.atleast_2d(z)
    y = np.asarray(y, dtype=np.int64)
    n_classes = z.shape[1]
    ks = sorted({min(int(k), n_classes) for k in ks})
    top = predict_topk(z, max(ks))
    out = {"top_k_error": {}}
    for k in ks:
        hit = np.any(top[:, :k] == y[:, None], axis=1)
        out["top_k_error"][k] = float(1.0 - hit.mean())
    correct = top[:, 0] == y
    per_class = np.full(n_classes, np.nan)
    for c in range(n_classes):
        mask = y == c
        if mask.any():
            per_class[c] = correct[mask].mean()
    out["per_class_accuracy"] = per_class
    out["mean_loss"] = float(loss(z, y).mean())
    out["mean_true_confidence"] = float(z[np.arange(len(y)), y].mean())
    return out


def _record(state, phase, train_loss, moves, eval_data, config, sink):
    n = state.head.num_classes
    errs = evaluate(state, eval_data, (1, 5))["top_k_error"]
    rec = {
        "epoch": state.epoch,
        "phase": phase,
        "loss": train_loss,
        "top1": errs[1],
        "top5": errs[min(5, n)],
        "psi_moves": int(moves),
    }
    state.history.append(rec)
    state.epoch += 1
    if sink is not None:
        sink(rec)
    log.info("epoch %d %s loss=%.5f top1=%.4f moves=%d", rec["epoch"], phase, train_loss, rec["top1"], moves)
    return rec


# -- full run ----------------------------------------------------------------

@dataclass
class RunResult:
    state: TrainState
    best: dict
    best_state: TrainState = None


def fit(train, hierarchy, config, test=None, sink=None, state=None):
    """Run warm-up and adaptation epochs until convergence or ``max_epochs``.

    ``sink`` receives each epoch's metrics record. Pass ``state`` to resume
    from a checkpoint.
    """
    config.validate()
    train.check_all_classes_present()
    if hierarchy.num_classes != train.num_classes:
        raise InvalidInputError(f"hierarchy covers {hierarchy.num_classes} classes, "
                                f"dataset has {train.num_classes}")
    if state is None:
        state = init_state(train.input_dim, hierarchy, config)
    eval_data = test if test is not None and test.size else train
    best = {"epoch": None, "top1": np.inf}
    best_state = None

    def track(rec):
        nonlocal best_state
        if rec["top1"] < best["top1"]:
            best.update(epoch=rec["epoch"], top1=rec["top1"])
            best_state = snapshot(state)
        if sink is not None:
            sink(rec)

    warmup(state, train, config, eval_data, track)
    if config.adapt and not state.counts:
        init_adaptation(state, train)
    while state.epoch < config.max_epochs:
        adapt_and_train_epoch(state, train, config, eval_data, track)
        if check_convergence(state.losses, config):
            break
    return RunResult(state, best, best_state)


def snapshot(state):
    return TrainState(state.net.copy(), state.head.copy(), state.hierarchy, state.epoch,
                      {l: c.copy() for l, c in state.counts.items()},
                      [dict(r) for r in state.history])


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, state, config=None):
    """Write a versioned ``.npz`` container (header JSON plus arrays)."""
    head, net = state.head, state.net
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "num_classes": head.num_classes,
        "num_levels": head.num_levels,
        "feature_dim": head.feature_dim,
        "input_dim": net.input_dim,
        "level_sizes": [c.num_groups for c in head.classifiers],
        "theta": head.theta.tolist(),
        "activations": [l.activation for l in net.layers],
        "dropout_rate": net.dropout_rate,
        "epoch": state.epoch,
        "history": state.history,
        "adapted_levels": sorted(state.counts),
        "config": config.to_json() if config is not None else None,
    }
    arrays = {"header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for k, layer in enumerate(net.layers):
        arrays[f"net_w{k}"] = layer.weight
        arrays[f"net_b{k}"] = layer.bias
    for l, clf in enumerate(head.classifiers, start=1):
        arrays[f"head_w{l}"] = clf.weight
        arrays[f"head_b{l}"] = clf.bias
        psi = head.psis[l - 1]
        arrays[f"psi{l}"] = psi.toarray() if hasattr(psi, "toarray") else psi
        arrays[f"init_membership{l}"] = state.hierarchy.memberships[l - 1]
    for l, c in state.counts.items():
        arrays[f"omega{l}"] = c.omega
        arrays[f"group_labels{l}"] = c.labels
    # fixed zip timestamps so identical states give identical bytes
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            member = io.BytesIO()
            np.save(member, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, member.getvalue())
    Path(path).write_bytes(buf.getvalue())


def read_header(path):
    with np.load(path, allow_pickle=False) as data:
        return _parse_header(data)


def _parse_header(data):
    if "header" not in data:
        raise InvalidInputError("not an lmm checkpoint (no header)")
    header = json.loads(bytes(data["header"]).decode())
    if header.get("format") != CHECKPOINT_FORMAT:
        raise InvalidInputError("not an lmm checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise InvalidInputError(f"unsupported checkpoint version {header.get('version')}")
    return header


def load_checkpoint(path):
    """Return ``(state, config)``; ``config`` is None if none was stored."""
    with np.load(path, allow_pickle=False) as data:
        header = _parse_header(data)
        layers = [DenseLayer(data[f"net_w{k}"].copy(), data[f"net_b{k}"].copy(), act)
                  for k, act in enumerate(header["activations"])]
        net = FeatureNet(layers, header["dropout_rate"], header["input_dim"])
        L = header["num_levels"]
        classifiers = [LevelClassifier(data[f"head_w{l}"].copy(), data[f"head_b{l}"].copy())
                       for l in range(1, L + 1)]
        psis = [data[f"psi{l}"].copy() for l in range(1, L + 1)]
        hierarchy = Hierarchy([data[f"init_membership{l}"].copy() for l in range(1, L + 1)])
        counts = {l: adaptation.CountMatrix(l, data[f"omega{l}"].copy(), data[f"group_labels{l}"].copy())
                  for l in header["adapted_levels"]}
    head = LMMHead(classifiers, np.asarray(header["theta"]), psis)
    state = TrainState(net, head, hierarchy, header["epoch"], counts, header["history"])
    config = TrainConfig.from_json(header["config"]) if header["config"] else None
    return state, config


# -- reporting ---------------------------------------------------------------

def reassignments(state):
    """Classes whose column-argmax group differs from the pre-trained hierarchy.

    Returns a list of dicts ``{"level", "class", "from", "to"}``.
    """
    out = []
    for l in range(1, state.head.num_levels):
        psi = state.head.psis[l - 1]
        psi = psi.toarray() if hasattr(psi, "toarray") else psi
        now = adaptation.column_assignments(psi)
        before = state.hierarchy.memberships[l - 1]
        for y in np.flatnonzero(now != before):
            out.append({"level": l, "class": int(y), "from": int(before[y]), "to": int(now[y])})
    return out


def purity(assignment, truth):
    """Fraction of classes sharing the majority true group of their assigned group."""
    assignment = np.asarray(assignment)
    truth = np.asarray(truth)
    total = 0
    for g in np.unique(assignment):
        total += np.bincount(truth[assignment == g]).max()
    return total / assignment.size
