"""Labelled sample sets: synthetic hierarchical clusters, feature files, splits.

A :class:`Dataset` stores its samples column-wise (``ids``, ``inputs``,
``labels``) rather than as a list of sample objects; ``dataset[i]`` still
returns a single :class:`Sample`.
"""
import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import InvalidInputError, ParseError
from .numerics import sub_stream

log = logging.getLogger(__name__)

BINARY_MAGIC = b"HMX1"


@dataclass(frozen=True)
class Sample:
    id: int
    input: np.ndarray
    label: int


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    ids: np.ndarray = None
    class_names: list = None

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.ids is None:
            self.ids = np.arange(len(self.labels), dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        if len(self.labels) == 0:
            self.inputs = self.inputs.reshape(0, self.inputs.shape[-1] if self.inputs.size else 0)
        if not (len(self.inputs) == len(self.labels) == len(self.ids)):
            raise InvalidInputError("inputs, labels and ids must have the same length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InvalidInputError(f"labels must lie in [0, {self.num_classes})")

    @property
    def size(self):
        return len(self.labels)

    @property
    def input_dim(self):
        return self.inputs.shape[1]

    def __len__(self):
        return self.size

    def __getitem__(self, i):
        return Sample(int(self.ids[i]), self.inputs[i], int(self.labels[i]))

    def subset(self, index):
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.inputs[index], self.labels[index], self.num_classes,
                       self.ids[index], self.class_names)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def check_all_classes_present(self):
        missing = np.flatnonzero(self.class_counts() == 0)
        if missing.size:
            raise InvalidInputError(f"classes without samples: {missing.tolist()}")


@dataclass(frozen=True)
class SynthSpec:
    num_superclusters: int = 4
    classes_per_supercluster: int = 5
    input_dim: int = 16
    intra_spread: float = 1.0
    inter_spread: float = 5.0
    samples_per_class: int = 100
    seed: int = 0
    # per-coordinate std of sample noise around its class mean; None means intra_spread
    noise: float = None

    def validate(self):
        counts = (self.num_superclusters, self.classes_per_supercluster,
                  self.input_dim, self.samples_per_class)
        if min(counts) < 1:
            raise InvalidInputError("all counts in SynthSpec must be >= 1")
        if self.intra_spread <= 0 or self.inter_spread <= 0:
            raise InvalidInputError("spreads must be positive")
        if self.inter_spread <= self.intra_spread:
            raise InvalidInputError("inter_spread must exceed intra_spread")
        if self.noise is not None and self.noise < 0:
            raise InvalidInputError("noise must be nonnegative")


@dataclass
class PlantedGrouping:
    """Ground truth of a synthetic dataset."""

    class_to_supercluster: np.ndarray
    class_means: np.ndarray
    supercluster_centers: np.ndarray = field(repr=False)

    def to_json(self):
        return {"class_to_supercluster": self.class_to_supercluster.tolist()}


def generate_synthetic(spec):
    """Two-level Gaussian clusters: superclusters of classes of samples.

    Returns ``(dataset, planted)``. Samples are ordered class by class.
    """
    spec.validate()
    rng = sub_stream(spec.seed, "synth")
    n_super, per, d = spec.num_superclusters, spec.classes_per_supercluster, spec.input_dim
    n_classes = n_super * per
    centers = rng.normal(0.0, spec.inter_spread, size=(n_super, d))
    class_super = np.repeat(np.arange(n_super), per)
    means = centers[class_super] + rng.normal(0.0, spec.intra_spread, size=(n_classes, d))
    noise = spec.intra_spread if spec.noise is None else spec.noise
    labels = np.repeat(np.arange(n_classes), spec.samples_per_class)
    inputs = means[labels] + rng.normal(0.0, noise, size=(labels.size, d))
    dataset = Dataset(inputs, labels, n_classes)
    return dataset, PlantedGrouping(class_super, means, centers)


def split(dataset, train_fraction, seed):
    """Stratified split into (train, test).

    Per-class train counts are ``floor(count * fraction)`` plus one for the
    classes with the largest remainders (lower class index first), so the
    overall train size is ``round(size * fraction)``. Classes with two or
    more samples always appear on both sides.
    """
    if not 0 < train_fraction < 1:
        raise InvalidInputError("train_fraction must lie strictly between 0 and 1")
    rng = sub_stream(seed, "split")
    counts = dataset.class_counts()
    exact = counts * train_fraction
    k = np.floor(exact).astype(np.int64)
    extra = int(np.floor(dataset.size * train_fraction + 0.5)) - int(k.sum())
    order = np.lexsort((np.arange(counts.size), -(exact - k)))
    k[order[:max(extra, 0)]] += 1
    train_idx, test_idx = [], []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        if members.size == 0:
            continue
        members = members[rng.permutation(members.size)]
        if members.size == 1:
            log.warning("class %d has a single sample; it goes to the training split", c)
            train_idx.append(members)
            continue
        kc = min(max(int(k[c]), 1), members.size - 1)
        train_idx.append(members[:kc])
        test_idx.append(members[kc:])
    train_idx = np.sort(np.concatenate(train_idx)) if train_idx else np.zeros(0, np.int64)
    test_idx = np.sort(np.concatenate(test_idx)) if test_idx else np.zeros(0, np.int64)
    return dataset.subset(train_idx), dataset.subset(test_idx)


# -- feature files -----------------------------------------------------------

def save_csv(dataset, path):
    path = Path(path)
    d = dataset.input_dim
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label"] + [f"f{j}" for j in range(d)])
        for i in range(dataset.size):
            writer.writerow([int(dataset.ids[i]), int(dataset.labels[i])]
                            + [repr(float(v)) for v in dataset.inputs[i]])


def load_csv(path, num_classes=None):
    path = Path(path)
    ids, labels, rows = [], [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        if len(header) < 3 or header[0].strip() != "id" or header[1].strip() != "label":
            raise ParseError("header must start with 'id,label,f0'", 1)
        d = len(header) - 2
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 2:
                raise ParseError(f"expected {d + 2} fields, found {len(row)}", lineno)
            try:
                ids.append(int(row[0]))
                label = int(row[1])
                feats = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if label < 0 or (num_classes is not None and label >= num_classes):
                raise ParseError(f"label {label} outside [0, {num_classes})", lineno)
            if not np.all(np.isfinite(feats)):
                raise ParseError("non-finite feature value", lineno)
            labels.append(label)
            rows.append(feats)
    n = num_classes if num_classes is not None else (max(labels) + 1 if labels else 0)
    inputs = np.asarray(rows, dtype=np.float64).reshape(len(rows), d)
    return Dataset(inputs, labels, n, ids)


def save_binary(dataset, path):
    path = Path(path)
    n, xi, d = dataset.num_classes, dataset.size, dataset.input_dim
    record = np.dtype([("id", "<u4"), ("label", "<u4"), ("x", "<f4", (d,))])
    recs = np.zeros(xi, dtype=record)
    recs["id"] = dataset.ids
    recs["label"] = dataset.labels
    recs["x"] = dataset.inputs
    with path.open("wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<III", n, xi, d))
        fh.write(recs.tobytes())


def load_binary(path):
    raw = Path(path).read_bytes()
    if raw[:4] != BINARY_MAGIC:
        raise ParseError("bad magic bytes, expected HMX1", 0)
    if len(raw) < 16:
        raise ParseError("truncated header", 0)
    n, xi, d = struct.unpack("<III", raw[4:16])
    record = np.dtype([("id", "<u4"), ("label", "<u4"), ("x", "<f4", (d,))])
    body = raw[16:]
    if len(body) != xi * record.itemsize:
        complete = len(body) // record.itemsize
        raise ParseError(f"expected {xi} records, file holds {len(body) / record.itemsize:g}",
                         complete + 1)
    recs = np.frombuffer(body, dtype=record)
    bad = np.flatnonzero(recs["label"] >= n)
    if bad.size:
        raise ParseError(f"label {int(recs['label'][bad[0]])} outside [0, {n})", int(bad[0]) + 1)
    return Dataset(recs["x"].astype(np.float64), recs["label"].astype(np.int64), int(n),
                   recs["id"].astype(np.int64))


def load_features(path, format=None, num_classes=None):
    """Load a dataset from ``csv`` or ``binary`` (guessed from the suffix if omitted)."""
    path = Path(path)
    if format is None:
        format = "binary" if path.suffix in (".bin", ".hmx") else "csv"
    if format == "csv":
        return load_csv(path, num_classes)
    if format == "binary":
        return load_binary(path)
    raise InvalidInputError(f"unknown feature format {format!r}")
