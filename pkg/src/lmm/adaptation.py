"""Bayesian adaptation of the group-to-class assignment matrices.

Every training image carries a group label per adapted level. The count
matrix ``omega[t, y]`` tallies images by (group label, class). Under a
symmetric-or-not Dirichlet prior ``beta`` on each row of Psi, the collapsed
conditional of one image's group label is::

    p(t_i = t | rest) ∝ (omega⁻ⁱ[t, y_i] + beta[y_i]) / (sum_y omega⁻ⁱ[t, y] + beta_0) * z^l_t(x_i)

which :func:`gibbs_sweep` samples image by image.
"""
import logging
from dataclasses import dataclass

import numpy as np

from .exceptions import CountUnderflowError, InvalidInputError
from .numerics import sample_categorical

log = logging.getLogger(__name__)


@dataclass
class CountMatrix:
    level: int
    omega: np.ndarray  # (N_l, N) int64
    labels: np.ndarray  # (Xi,) current group label per image

    @property
    def total(self):
        return int(self.omega.sum())

    def recount(self, y):
        return tally(self.labels, y, *self.omega.shape)

    def copy(self):
        return CountMatrix(self.level, self.omega.copy(), self.labels.copy())


def tally(group_labels, y, num_groups, num_classes):
    omega = np.zeros((num_groups, num_classes), dtype=np.int64)
    np.add.at(omega, (np.asarray(group_labels, dtype=np.int64), np.asarray(y, dtype=np.int64)), 1)
    return omega


def make_prior(num_classes, beta=1.0):
    beta = np.broadcast_to(np.asarray(beta, dtype=np.float64), (num_classes,)).copy()
    if np.any(beta <= 0):
        raise InvalidInputError("Dirichlet prior entries must be positive")
    return beta


def init_counts(labels, hierarchy, level):
    """Start every image in its class's group at ``level`` (1-based)."""
    if not 1 <= level <= hierarchy.depth:
        raise InvalidInputError(f"level {level} outside 1..{hierarchy.depth}")
    membership = hierarchy.memberships[level - 1]
    y = np.asarray(labels, dtype=np.int64)
    if y.size and y.max() >= membership.size:
        raise InvalidInputError(f"class {int(y.max())} is not covered by hierarchy level {level}")
    t = membership[y]
    n_groups = int(membership.max()) + 1
    return CountMatrix(level, tally(t, y, n_groups, membership.size), t.copy())


def gibbs_posterior(omega_excl, y_i, beta, level_probs):
    """Normalised conditional over groups for one image.

    ``omega_excl`` must already exclude the image's own count.
    """
    omega_excl = np.asarray(omega_excl, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    prior = (omega_excl[:, y_i] + beta[y_i]) / (omega_excl.sum(axis=1) + beta.sum())
    score = prior * np.asarray(level_probs, dtype=np.float64)
    return score / score.sum()


def gibbs_sweep(counts, y, level_probs, beta, rng):
    """One in-order collapsed Gibbs sweep; updates ``counts`` in place.

    ``level_probs`` is the ``(Xi, N_l)`` matrix of group probabilities from
    the current level classifier. Returns the number of images whose group
    label changed.
    """
    y = np.asarray(y, dtype=np.int64)
    omega = counts.omega
    labels = counts.labels
    beta = np.asarray(beta, dtype=np.float64)
    beta0 = beta.sum()
    row_tot = omega.sum(axis=1).astype(np.float64)
    moves = 0
    for i in range(y.size):
        yi, old = y[i], labels[i]
        if omega[old, yi] <= 0:
            raise CountUnderflowError(f"count underflow at image {i} (group {old}, class {yi})")
        omega[old, yi] -= 1
        row_tot[old] -= 1
        score = (omega[:, yi] + beta[yi]) / (row_tot + beta0) * level_probs[i]
        new = sample_categorical(score, rng)
        omega[new, yi] += 1
        row_tot[new] += 1
        labels[i] = new
        moves += int(new != old)
    return moves


def estimate_psi(omega, beta):
    """Posterior-mean Psi: ``(omega + beta) / (row total + beta_0)``."""
    omega = np.asarray(omega, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    return (omega + beta[None, :]) / (omega.sum(axis=1, keepdims=True) + beta.sum())


def apply_nonoverlap(psis):
    """Keep only each class's strongest group per level, then renormalise rows.

    Rows that lose every class stay all-zero (the group then carries no
    class mass) and are reported in the returned list of
    ``(level, group)`` pairs. Returns ``(pruned_psis, dead_rows)``.
    """
    out, dead = [], []
    for l, psi in enumerate(psis, start=1):
        psi = np.asarray(psi, dtype=np.float64)
        keep = np.argmax(psi, axis=0)  # first maximum = lowest group index
        pruned = np.zeros_like(psi)
        cols = np.arange(psi.shape[1])
        pruned[keep, cols] = psi[keep, cols]
        sums = pruned.sum(axis=1, keepdims=True)
        empty = sums[:, 0] <= 0
        for t in np.flatnonzero(empty):
            log.warning("level %d group %d lost all classes under the non-overlap constraint", l, t)
            dead.append((l, int(t)))
        # rows that lost nothing are left bit-for-bit alone, so pruning is exactly idempotent
        changed = np.any(pruned != psi, axis=1) & ~empty
        pruned[changed] /= sums[changed]
        out.append(pruned)
    return out, dead


def column_assignments(psi):
    """Class -> group map given by the column-wise argmax of Psi."""
    return np.argmax(np.asarray(psi), axis=0)
