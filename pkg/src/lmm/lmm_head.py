"""Level-wise mixture classifier head.

Each hierarchy level ``l`` has a softmax over its ``N_l`` groups,
``z^l = softmax(x W_l^T + b_l)``. Class probabilities mix the levels through
the group-to-class assignment matrices::

    z = sum_l theta_l * z^l @ Psi_l

and the per-sample loss is ``-log z[y]``. All batch functions take ``x`` as an
``(B, d)`` array; gradients are those of the batch-mean loss.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .exceptions import DimensionError, InvalidInputError
from .numerics import softmax_stable

LOSS_FLOOR = 1e-12


@dataclass
class LevelClassifier:
    weight: np.ndarray  # (N_l, d)
    bias: np.ndarray  # (N_l,)

    @property
    def num_groups(self):
        return self.weight.shape[0]


def forward_level(classifier, x):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != classifier.weight.shape[1]:
        raise DimensionError(f"features have dimension {x.shape[1]}, "
                             f"classifier expects {classifier.weight.shape[1]}")
    return softmax_stable(x @ classifier.weight.T + classifier.bias, axis=-1)


def _is_identity(psi):
    n_l, n = psi.shape
    if n_l != n:
        return False
    if sparse.issparse(psi):
        return psi.nnz == n and np.all(psi.diagonal() == 1.0)
    return np.count_nonzero(psi) == n and np.all(np.diag(psi) == 1.0)


def _psi_operator(psi):
    """Return something that right-multiplies a ``(B, N_l)`` batch efficiently."""
    if _is_identity(psi):
        return None
    if sparse.issparse(psi):
        return psi.tocsr()
    nnz = np.count_nonzero(psi)
    if nnz <= 0.25 * psi.size:
        return sparse.csr_matrix(psi)
    return psi


def _as_psi(psi):
    return psi.astype(np.float64) if sparse.issparse(psi) else np.asarray(psi, dtype=np.float64)


def _psi_columns(psi, y):
    """``Psi[:, y].T`` as a dense ``(B, N_l)`` array."""
    cols = psi[:, y]
    return cols.toarray().T if sparse.issparse(cols) else cols.T


def _apply_psi(zl, op):
    if op is None:
        return zl
    out = zl @ op
    return np.asarray(out)


def mix(theta, level_probs, psis, psi_ops=None):
    """Mixture ``sum_l theta_l z^l Psi^l`` for a batch."""
    theta = np.asarray(theta, dtype=np.float64)
    if not (len(theta) == len(level_probs) == len(psis)):
        raise DimensionError(f"{len(theta)} mixture weights for {len(level_probs)} levels "
                             f"and {len(psis)} assignment matrices")
    if psi_ops is None:
        psi_ops = [_psi_operator(_as_psi(p)) for p in psis]
    z = None
    for th, zl, psi, op in zip(theta, level_probs, psis, psi_ops):
        zl = np.atleast_2d(zl)
        if zl.shape[1] != psi.shape[0]:
            raise DimensionError("level distribution length does not match Psi rows")
        term = th * _apply_psi(zl, op)
        z = term if z is None else z + term
    return z


def loss(z, y):
    """Per-sample negative log-likelihood ``-log max(z[y], floor)``."""
    z = np.atleast_2d(z)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    p = z[np.arange(len(y)), y]
    return -np.log(np.maximum(p, LOSS_FLOOR))


def predict_topk(z, k):
    """Indices of the ``k`` largest entries per row, descending; ties to lower index."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if not 1 <= k <= z.shape[1]:
        raise InvalidInputError(f"k must lie in [1, {z.shape[1]}]")
    # stable sort on -z keeps lower indices first among equal scores
    top = np.argsort(-z, axis=1, kind="stable")[:, :k]
    return top[0] if single else top


@dataclass
class Prediction:
    level_probs: list
    z: np.ndarray

    def topk(self, k):
        return predict_topk(self.z, k)


def backward_head(prediction, y, theta, psis, classifiers, x):
    """Gradients of the batch-mean loss.

    Returns ``(grad_weights, grad_biases, grad_x)``. For each level the
    gradient on the group softmax output is ``theta_l * Psi_l[:, y] * dL/dz_y``;
    it is pushed through the softmax Jacobian to the level's logits, then to
    its weights, biases and the shared features. ``grad_x`` rows carry the
    ``1/B`` of the mean.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    b = len(y)
    z_true = prediction.z[np.arange(b), y]
    # zero gradient where the loss is clamped at the floor
    dz_true = np.where(z_true > LOSS_FLOOR, -1.0 / np.maximum(z_true, LOSS_FLOOR), 0.0) / b
    grad_w, grad_b = [], []
    grad_x = np.zeros_like(x)
    for th, zl, psi, clf in zip(theta, prediction.level_probs, psis, classifiers):
        # (B, N_l): theta_l * Psi_l[t, y_i] * dL/dz_{y_i}
        dzl = th * _psi_columns(psi, y) * dz_true[:, None]
        dlogits = zl * (dzl - np.sum(dzl * zl, axis=1, keepdims=True))
        grad_w.append(dlogits.T @ x)
        grad_b.append(dlogits.sum(axis=0))
        grad_x = grad_x + dlogits @ clf.weight
    return grad_w, grad_b, grad_x


def l2_penalty(weights, alpha):
    """``(alpha/2) * sum ||W_l||_F^2`` and its gradients."""
    if alpha < 0:
        raise InvalidInputError("alpha must be >= 0")
    penalty = 0.5 * alpha * sum(float(np.sum(w * w)) for w in weights)
    return penalty, [alpha * w for w in weights]


def regularized_loss(data_loss, weights, alpha):
    return data_loss + l2_penalty(weights, alpha)[0]


def _check_theta(theta):
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(theta < 0) or abs(theta.sum() - 1.0) > 1e-9:
        raise InvalidInputError(f"theta must lie on the simplex, got {theta.tolist()}")
    return theta


def theta_from_spec(spec, num_levels):
    """``"uniform"``, ``"bottom-only"`` or an explicit sequence of weights."""
    if spec is None or (isinstance(spec, str) and spec == "uniform"):
        return np.full(num_levels, 1.0 / num_levels)
    if isinstance(spec, str) and spec == "bottom-only":
        theta = np.zeros(num_levels)
        theta[-1] = 1.0
        return theta
    if isinstance(spec, str):
        spec = [float(v) for v in spec.split(",")]
    theta = np.asarray(spec, dtype=np.float64)
    if theta.size != num_levels:
        raise InvalidInputError(f"theta has {theta.size} entries for {num_levels} levels")
    return _check_theta(theta)


@dataclass
class LMMHead:
    """Per-level classifiers, mixture weights and assignment matrices.

    ``psis`` may hold dense arrays or scipy sparse matrices; sparse storage
    keeps scoring cost linear in ``N`` for large class counts.
    """

    classifiers: list
    theta: np.ndarray
    psis: list
    _ops: list = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.theta = _check_theta(self.theta)
        if not (len(self.classifiers) == len(self.psis) == len(self.theta)):
            raise DimensionError("classifiers, psis and theta must have one entry per level")
        n = self.psis[-1].shape[1]
        for l, (clf, psi) in enumerate(zip(self.classifiers, self.psis), start=1):
            if psi.shape != (clf.num_groups, n):
                raise DimensionError(f"level {l}: Psi is {psi.shape}, expected ({clf.num_groups}, {n})")
        self.set_psis(self.psis)

    @property
    def num_levels(self):
        return len(self.classifiers)

    @property
    def num_classes(self):
        return self.psis[-1].shape[1]

    @property
    def feature_dim(self):
        return self.classifiers[0].weight.shape[1]

    def set_psis(self, psis):
        self.psis = [_as_psi(p) for p in psis]
        self._ops = [_psi_operator(p) for p in self.psis]

    def forward(self, x):
        level_probs = [forward_level(c, x) for c in self.classifiers]
        return Prediction(level_probs, mix(self.theta, level_probs, self.psis, self._ops))

    def backward(self, prediction, y, x):
        return backward_head(prediction, y, self.theta, self.psis, self.classifiers, x)

    def weights(self):
        return [c.weight for c in self.classifiers]

    def copy(self):
        return LMMHead([LevelClassifier(c.weight.copy(), c.bias.copy()) for c in self.classifiers],
                       self.theta.copy(), [p.copy() for p in self.psis])


def init_head(group_counts, feature_dim, theta=None, psis=None, rng_for_level=None):
    """Small random weights, zero biases.

    ``rng_for_level(l, n_l)`` supplies the generator for each level so that a
    level's initial weights do not depend on which other levels exist.
    """
    classifiers = []
    for l, k in enumerate(group_counts, start=1):
        rng = rng_for_level(l, k)
        w = rng.normal(0.0, 0.01, size=(k, feature_dim))
        classifiers.append(LevelClassifier(w, np.zeros(k)))
    theta = theta_from_spec(theta, len(group_counts))
    if psis is None:
        n = group_counts[-1]
        psis = [np.full((k, n), 1.0 / n) if k != n else np.eye(n) for k in group_counts]
    return LMMHead(classifiers, theta, psis)
