"""Pre-trained visual hierarchy: class means, similarity kernel, clustering.

Levels are numbered 1..L from the coarsest used level down to the bottom
level, where every class is its own group. A hierarchy is stored as one
``class -> group`` membership vector per level; group ids at each level are
ordered by the smallest class they contain.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import InvalidInputError

log = logging.getLogger(__name__)


@dataclass
class ClassRepresentation:
    class_id: int
    vector: np.ndarray


def class_representations(dataset, feature_net=None, batch_size=1024):
    """Mean eval-mode feature of every class (raw inputs if no net is given)."""
    counts = dataset.class_counts()
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise InvalidInputError(f"classes without samples: {empty.tolist()}")
    if feature_net is None:
        feats = dataset.inputs
    else:
        chunks = [feature_net.forward(dataset.inputs[s:s + batch_size], mode="eval")[0]
                  for s in range(0, dataset.size, batch_size)]
        feats = np.concatenate(chunks)
    sums = np.zeros((dataset.num_classes, feats.shape[1]))
    np.add.at(sums, dataset.labels, feats)
    means = sums / counts[:, None]
    return [ClassRepresentation(c, means[c]) for c in range(dataset.num_classes)]


@dataclass
class HierarchyConfig:
    num_levels: int = 2
    # explicit group counts for levels 1..L-1; takes precedence over branching
    group_counts: tuple = None
    branching: float = None
    linkage: str = "average"
    self_tune_k: int = 7

    def level_sizes(self, num_classes):
        """Group counts for all L levels, bottom level included."""
        if self.num_levels < 1:
            raise InvalidInputError("num_levels must be >= 1")
        n_upper = self.num_levels - 1
        if self.group_counts is not None:
            sizes = [int(c) for c in self.group_counts]
            if len(sizes) != n_upper:
                raise InvalidInputError(f"need {n_upper} group counts for {self.num_levels} levels")
        elif self.branching is not None:
            if self.branching <= 1:
                raise InvalidInputError("branching must be > 1")
            sizes = [min(num_classes, max(1, int(round(self.branching ** l)))) for l in range(1, n_upper + 1)]
        elif n_upper == 0:
            sizes = []
        else:
            # equal ratios between 1 and N
            sizes = [max(1, int(round(num_classes ** (l / self.num_levels)))) for l in range(1, n_upper + 1)]
        for c in sizes:
            if c < 1:
                raise InvalidInputError("group counts must be >= 1")
            if c > num_classes:
                raise InvalidInputError(f"requested {c} groups but only {num_classes} classes exist")
        if any(b < a for a, b in zip(sizes, sizes[1:])):
            raise InvalidInputError("group counts must not decrease toward the bottom")
        return sizes + [num_classes]


@dataclass
class SimilarityMatrix:
    values: np.ndarray
    sigmas: np.ndarray
    distances: np.ndarray = field(repr=False, default=None)


def similarity_matrix(reps, config=None):
    """Self-tuned Gaussian-type kernel on Euclidean distances between class means.

    ``S_ij = exp(-d_ij / sqrt(s_i s_j))`` where ``s_i`` is the distance from
    class ``i`` to its ``k``-th nearest other class.
    """
    config = config or HierarchyConfig()
    X = np.asarray([r.vector for r in reps], dtype=np.float64) if not isinstance(reps, np.ndarray) else reps
    n = X.shape[0]
    if n < 2:
        raise InvalidInputError("need at least two classes")
    k = config.self_tune_k
    if not 1 <= k < n:
        raise InvalidInputError(f"self_tune_k must lie in [1, {n - 1}], got {k}")
    diff = X[:, None, :] - X[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    np.fill_diagonal(dist, 0.0)
    # column 0 of each sorted row is the zero self-distance
    sigmas = np.sort(dist, axis=1)[:, k]
    if np.any(sigmas <= 0):
        off = dist[~np.eye(n, dtype=bool)]
        fallback = off.mean() if off.mean() > 0 else 1.0
        log.warning("%d classes have zero local scale (duplicate representations); "
                    "using mean distance %.4g", int(np.sum(sigmas <= 0)), fallback)
        sigmas = np.where(sigmas > 0, sigmas, fallback)
    scale = np.sqrt(np.outer(sigmas, sigmas))
    S = np.exp(-dist / scale)
    np.fill_diagonal(S, 1.0)
    return SimilarityMatrix(S, sigmas, dist)


def agglomerate(similarity, linkage="average"):
    """Merge clusters by highest linkage similarity; returns the merge list.

    Each merge is ``(slot_a, slot_b)`` with ``slot_a < slot_b``: cluster slots
    are indexed by their smallest class and the merged cluster keeps
    ``slot_a``. Ties go to the lexicographically smallest pair.
    """
    S = np.array(similarity.values if isinstance(similarity, SimilarityMatrix) else similarity,
                 dtype=np.float64)
    n = S.shape[0]
    if linkage not in ("average", "complete"):
        raise InvalidInputError(f"unknown linkage {linkage!r}")
    active = np.ones(n, dtype=bool)
    sizes = np.ones(n)
    M = S.copy()
    np.fill_diagonal(M, -np.inf)
    merges = []
    for _ in range(n - 1):
        masked = np.where(active[:, None] & active[None, :], M, -np.inf)
        masked = np.triu(masked, 1) + np.tril(np.full_like(masked, -np.inf))
        flat = int(np.argmax(masked))  # first maximum in row-major order = smallest pair
        a, b = divmod(flat, n)
        merges.append((a, b))
        if linkage == "average":
            row = (sizes[a] * M[a] + sizes[b] * M[b]) / (sizes[a] + sizes[b])
        else:
            row = np.minimum(M[a], M[b])
        M[a, :] = row
        M[:, a] = row
        M[a, a] = -np.inf
        sizes[a] += sizes[b]
        active[b] = False
    return merges


def cut_merges(merges, n, num_groups):
    """Membership after applying the first ``n - num_groups`` merges."""
    if not 1 <= num_groups <= n:
        raise InvalidInputError(f"cannot cut {n} classes into {num_groups} groups")
    parent = np.arange(n)
    for a, b in merges[: n - num_groups]:
        parent[parent == b] = a
    return _canonical(parent)


def _canonical(membership):
    """Relabel groups 0..K-1 in order of their smallest member."""
    membership = np.asarray(membership, dtype=np.int64)
    _, first = np.unique(membership, return_index=True)
    order = np.argsort(first, kind="stable")
    roots = membership[first[order]]
    lookup = {int(r): g for g, r in enumerate(roots)}
    return np.array([lookup[int(m)] for m in membership], dtype=np.int64)


@dataclass
class Hierarchy:
    memberships: list  # one class->group vector per level, coarsest first

    def __post_init__(self):
        self.memberships = [np.asarray(m, dtype=np.int64) for m in self.memberships]
        if not self.memberships:
            raise InvalidInputError("a hierarchy needs at least one level")
        n = self.num_classes
        for l, m in enumerate(self.memberships, start=1):
            if m.shape != (n,):
                raise InvalidInputError(f"level {l} covers {m.size} classes, expected {n}")
            groups = np.unique(m)
            if groups[0] != 0 or groups[-1] != groups.size - 1:
                raise InvalidInputError(f"level {l} group ids must be contiguous from 0")
        bottom = self.memberships[-1]
        if np.unique(bottom).size != n:
            raise InvalidInputError("bottom level must hold one class per group")

    @property
    def depth(self):
        return len(self.memberships)

    @property
    def num_classes(self):
        return self.memberships[0].size

    def group_counts(self):
        return [int(m.max()) + 1 for m in self.memberships]

    def groups(self, level):
        """List of class lists for a 1-based level."""
        m = self.memberships[level - 1]
        return [np.flatnonzero(m == t).tolist() for t in range(int(m.max()) + 1)]

    def group_sizes(self, level):
        return np.bincount(self.memberships[level - 1])

    def nesting_violations(self):
        """Number of (level, group) pairs whose classes straddle two parents."""
        bad = 0
        for upper, lower in zip(self.memberships[:-1], self.memberships[1:]):
            for t in range(int(lower.max()) + 1):
                if np.unique(upper[lower == t]).size > 1:
                    bad += 1
        return bad

    def to_json(self):
        return {
            "depth": self.depth,
            "levels": [
                {"level": l, "groups": [{"id": t, "classes": cls} for t, cls in enumerate(self.groups(l))]}
                for l in range(1, self.depth + 1)
            ],
        }

    @classmethod
    def from_json(cls, data):
        levels = sorted(data["levels"], key=lambda lv: lv["level"])
        if len(levels) != data["depth"]:
            raise InvalidInputError("depth does not match the number of levels")
        n = sum(len(g["classes"]) for g in levels[0]["groups"])
        memberships = []
        for lv in levels:
            m = np.full(n, -1, dtype=np.int64)
            for g in lv["groups"]:
                for y in g["classes"]:
                    if not 0 <= y < n or m[y] != -1:
                        raise InvalidInputError(f"level {lv['level']}: class {y} invalid or repeated")
                    m[y] = g["id"]
            if np.any(m < 0):
                raise InvalidInputError(f"level {lv['level']} does not cover every class")
            memberships.append(m)
        return cls(memberships)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))

    @classmethod
    def from_groupings(cls, groupings):
        """Build from class->group vectors for the non-bottom levels."""
        groupings = [_canonical(g) for g in groupings]
        n = groupings[0].size if groupings else None
        if n is None:
            raise InvalidInputError("use Hierarchy.flat(n) for a bottom-only hierarchy")
        return cls(groupings + [np.arange(n)])

    @classmethod
    def flat(cls, num_classes):
        return cls([np.arange(num_classes)])


def build_hierarchy(similarity, config=None):
    config = config or HierarchyConfig()
    S = similarity.values if isinstance(similarity, SimilarityMatrix) else np.asarray(similarity)
    n = S.shape[0]
    sizes = config.level_sizes(n)
    merges = agglomerate(S, config.linkage)
    memberships = [cut_merges(merges, n, k) for k in sizes[:-1]]
    return Hierarchy(memberships + [np.arange(n)])


def init_psi(hierarchy):
    """Per-level ``N_l x N`` matrices with ``1/C_t`` on each group's members."""
    psis = []
    n = hierarchy.num_classes
    for m in hierarchy.memberships:
        k = int(m.max()) + 1
        sizes = np.bincount(m, minlength=k).astype(np.float64)
        psi = np.zeros((k, n))
        psi[m, np.arange(n)] = 1.0 / sizes[m]
        psis.append(psi)
    return psis


def psi_to_json(psis):
    return [{"level": l, "rows": p.tolist()} for l, p in enumerate(psis, start=1)]


def psi_from_json(data):
    return [np.asarray(entry["rows"], dtype=np.float64)
            for entry in sorted(data, key=lambda e: e["level"])]


def permute_groups(grouping, fraction, seed):
    """Mis-assign a fraction of classes by rotating their group labels.

    Picks ``round(fraction * N)`` classes, spread over as many distinct groups
    as possible, and cycles their groups so each chosen class lands in a
    different group. Returns ``(new_grouping, moved_classes)``.
    """
    from .numerics import sub_stream

    grouping = np.asarray(grouping, dtype=np.int64)
    n = grouping.size
    k = int(round(fraction * n))
    if k == 0:
        return grouping.copy(), []
    rng = sub_stream(seed, "permute-hierarchy")
    by_group = {int(g): list(rng.permutation(np.flatnonzero(grouping == g))) for g in np.unique(grouping)}
    order = sorted(by_group)
    chosen = []
    while len(chosen) < k:
        progressed = False
        for g in order:
            if by_group[g] and len(chosen) < k:
                chosen.append(int(by_group[g].pop()))
                progressed = True
        if not progressed:
            break
    if len({int(grouping[c]) for c in chosen}) < 2:
        raise InvalidInputError("need classes from at least two groups to permute")
    chosen = sorted(chosen, key=lambda c: (grouping[c], c))
    new = grouping.copy()
    for i, c in enumerate(chosen):
        j = (i + 1) % len(chosen)
        new[c] = grouping[chosen[j]]
    # with several chosen per group a rotation may leave some in place; shift until none are
    shift = 1
    while any(new[c] == grouping[c] for c in chosen) and shift < len(chosen):
        shift += 1
        for i, c in enumerate(chosen):
            new[c] = grouping[chosen[(i + shift) % len(chosen)]]
    return new, sorted(chosen)
