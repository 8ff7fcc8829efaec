"""Dense-matrix and stochastic primitives used throughout the package.

Everything is float64. Random streams are numpy ``Generator`` objects backed
by PCG64 and derived from ``(seed, name)`` pairs, so independent phases of a
run (initialisation, shuffling, Gibbs sampling, dropout) never share state.
"""
import zlib

import numpy as np

from .exceptions import DimensionError, InvalidDistributionError, InvalidInputError

__all__ = [
    "softmax_stable",
    "log_sum_exp",
    "make_rng",
    "sub_stream",
    "sample_categorical",
    "matmul",
    "add_bias",
    "transpose",
]


def softmax_stable(logits, axis=-1):
    """Softmax along ``axis`` with max-subtraction.

    >>> softmax_stable([1.0, 2.0]).round(8)
    array([0.26894142, 0.73105858])
    """
    a = np.asarray(logits, dtype=np.float64)
    if a.size == 0 or a.shape[axis] == 0:
        raise InvalidInputError("softmax of an empty vector")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("softmax input contains NaN or Inf")
    shifted = a - np.max(a, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_sum_exp(values, axis=-1):
    a = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("log_sum_exp input contains NaN or Inf")
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def _name_key(name):
    return zlib.crc32(str(name).encode("utf-8"))


def make_rng(seed):
    """PCG64 generator for an integer seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def sub_stream(seed, *names):
    """Named child stream of ``seed``.

    The stream depends only on ``seed`` and ``names`` (crc32-hashed), never on
    how many other streams were drawn before it, e.g.
    ``sub_stream(seed, "shuffle", epoch)``.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_name_key(n) for n in names]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def sample_categorical(probs, rng):
    """Draw one index with probability proportional to ``probs``."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise InvalidDistributionError("probabilities must be a non-empty vector")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InvalidDistributionError("probabilities must be finite and nonnegative")
    cdf = np.cumsum(p)
    total = cdf[-1]
    if total <= 0:
        raise InvalidDistributionError("probabilities sum to zero")
    u = rng.random() * total
    idx = int(np.searchsorted(cdf, u, side="right"))
    # guard against u landing exactly on the total, and skip zero-mass tails
    idx = min(idx, p.size - 1)
    while p[idx] == 0:
        idx -= 1
    return idx


def _as_2d(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a, b):
    a = _as_2d(a, "left operand")
    b = _as_2d(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def add_bias(a, bias):
    a = _as_2d(a, "matrix")
    bias = np.asarray(bias, dtype=np.float64)
    if bias.shape != (a.shape[1],):
        raise DimensionError(f"bias shape {bias.shape} does not match {a.shape[1]} columns")
    return a + bias


def transpose(a):
    return _as_2d(a, "matrix").T.copy()
