import itertools
from math import lgamma

import numpy as np
import pytest

from lmm.adaptation import (CountMatrix, apply_nonoverlap, column_assignments, estimate_psi, gibbs_posterior,
                            gibbs_sweep, init_counts, make_prior, tally)
from lmm.exceptions import CountUnderflowError, InvalidInputError
from lmm.hierarchy import Hierarchy, init_psi


def joint_log_weight(groups, y, z, beta, num_groups):
    """Unnormalised log p(all group labels) with each group's class distribution integrated out.

    Dirichlet-multinomial evidence per group times the classifier factor of every image.
    """
    beta = np.asarray(beta, dtype=float)
    total = sum(np.log(z[i][t]) for i, t in enumerate(groups))
    for t in range(num_groups):
        ys = [y[i] for i, g in enumerate(groups) if g == t]
        total += lgamma(beta.sum()) - lgamma(len(ys) + beta.sum())
        for c in range(beta.size):
            n = ys.count(c)
            total += lgamma(n + beta[c]) - lgamma(beta[c])
    return total


def enumerated_conditional(i, groups, y, z, beta, num_groups):
    """p(t_i | others) by evaluating the joint at every value of t_i."""
    logs = []
    for t in range(num_groups):
        g = list(groups)
        g[i] = t
        logs.append(joint_log_weight(g, y, z, beta, num_groups))
    w = np.exp(np.array(logs) - max(logs))
    return w / w.sum()


def excluded(groups, y, i, num_groups, num_classes):
    others = [k for k in range(len(y)) if k != i]
    return tally([groups[k] for k in others], [y[k] for k in others], num_groups, num_classes)


def test_posterior_hand_example():
    omega = np.array([[2, 0, 1], [0, 3, 0]])
    post = gibbs_posterior(omega, 0, np.ones(3), [0.5, 0.5])
    np.testing.assert_allclose(post, [0.75, 0.25], rtol=1e-15)
    # the same instance laid out as images, solved by enumerating the joint
    y = [0, 0, 2, 1, 1, 1, 0]
    groups = [0, 0, 0, 1, 1, 1, 0]
    z = [np.array([0.5, 0.5])] * len(y)
    np.testing.assert_allclose(enumerated_conditional(6, groups, y, z, np.ones(3), 2), [0.75, 0.25], rtol=1e-12)


def test_posterior_symmetry_and_zero_factor():
    omega = np.array([[1, 1], [1, 1]])
    np.testing.assert_allclose(gibbs_posterior(omega, 0, np.ones(2), [0.5, 0.5]), [0.5, 0.5])
    assert gibbs_posterior(omega, 1, np.ones(2), [0.0, 1.0])[0] == 0.0


def test_posterior_matches_enumeration_on_grid():
    rng = np.random.default_rng(5)
    worst = 0.0
    for n, n_l, xi in itertools.product(range(1, 5), range(1, 4), range(1, 7)):
        for beta in (np.full(n, 0.5), np.ones(n), np.linspace(0.3, 2.0, n)):
            y = rng.integers(0, n, size=xi).tolist()
            groups = rng.integers(0, n_l, size=xi).tolist()
            z = rng.dirichlet(np.ones(n_l), size=xi)
            for i in range(xi):
                got = gibbs_posterior(excluded(groups, y, i, n_l, n), y[i], beta, z[i])
                want = enumerated_conditional(i, groups, y, z, beta, n_l)
                worst = max(worst, np.max(np.abs(got - want)))
    assert worst < 1e-12


def test_deterministic_posterior_absorbs_in_one_sweep():
    y = np.array([0, 1, 0, 1])
    counts = CountMatrix(1, tally([0, 0, 0, 0], y, 2, 2), np.zeros(4, dtype=np.int64))
    probs = np.tile([0.0, 1.0], (4, 1))
    moves = gibbs_sweep(counts, y, probs, np.ones(2), np.random.default_rng(0))
    assert moves == 4
    np.testing.assert_array_equal(counts.labels, 1)
    np.testing.assert_array_equal(counts.omega, [[0, 0], [2, 2]])


def test_conservation_and_recount(rng):
    for _ in range(30):
        n, n_l, xi = int(rng.integers(1, 6)), int(rng.integers(1, 4)), int(rng.integers(0, 40))
        y = rng.integers(0, n, size=xi)
        labels = rng.integers(0, n_l, size=xi)
        counts = CountMatrix(1, tally(labels, y, n_l, n), labels.copy())
        probs = rng.dirichlet(np.ones(n_l), size=xi)
        for _ in range(3):
            gibbs_sweep(counts, y, probs, make_prior(n, 0.7), rng)
            assert counts.total == xi
            np.testing.assert_array_equal(counts.omega, counts.recount(y))


def test_underflow_guard():
    y = np.array([0])
    counts = CountMatrix(1, np.zeros((2, 1), dtype=np.int64), np.array([0]))
    with pytest.raises(CountUnderflowError):
        gibbs_sweep(counts, y, np.array([[0.5, 0.5]]), np.ones(1), np.random.default_rng(0))


def _kernel(i, states, y, z, beta, n_l, n):
    """Transition matrix over joint states for resampling image ``i``."""
    index = {s: k for k, s in enumerate(states)}
    K = np.zeros((len(states), len(states)))
    for s in states:
        post = gibbs_posterior(excluded(s, y, i, n_l, n), y[i], beta, z[i])
        for t in range(n_l):
            new = list(s)
            new[i] = t
            K[index[s], index[tuple(new)]] += post[t]
    return K


def test_two_state_chain_matches_exact_enumeration():
    # two free images of class 0; a third image of class 1 pinned to group 1 by a one-hot classifier
    y = np.array([0, 0, 1])
    z = np.array([[0.9, 0.1], [0.2, 0.8], [0.0, 1.0]])
    beta = np.ones(2)
    states = [(a, b, 1) for a in range(2) for b in range(2)]
    K = _kernel(0, states, y, z, beta, 2, 2) @ _kernel(1, states, y, z, beta, 2, 2)
    vals, vecs = np.linalg.eig(K.T)
    pi = np.real(vecs[:, np.argmin(np.abs(vals - 1))])
    pi /= pi.sum()
    exact = np.array([pi[0] + pi[1], pi[2] + pi[3]])  # marginal of image 0's label

    labels = np.array([0, 0, 1])
    counts = CountMatrix(1, tally(labels, y, 2, 2), labels.copy())
    rng = np.random.default_rng(11)
    sweeps = 100_000
    hits = np.zeros(2)
    for _ in range(sweeps):
        gibbs_sweep(counts, y, z, beta, rng)
        hits[counts.labels[0]] += 1
    np.testing.assert_allclose(hits / sweeps, exact, atol=0.02)


def test_init_counts():
    h = Hierarchy.from_groupings([[0, 0, 1]])
    c = init_counts(np.full(10, 2), h, 1)
    np.testing.assert_array_equal(c.omega, [[0, 0, 0], [0, 0, 10]])
    empty = init_counts(np.zeros(0, dtype=int), h, 1)
    assert empty.total == 0 and empty.omega.shape == (2, 3)
    with pytest.raises(InvalidInputError):
        init_counts([0], h, 3)
    with pytest.raises(InvalidInputError):
        init_counts([5], h, 1)


def test_estimate_psi_cases(rng):
    np.testing.assert_allclose(estimate_psi([[4, 0, 0]], np.ones(3)), [[5 / 7, 1 / 7, 1 / 7]], rtol=1e-15)
    np.testing.assert_allclose(estimate_psi(np.zeros((2, 4)), np.ones(4)), np.full((2, 4), 0.25))
    for _ in range(200):
        omega = rng.integers(0, 50, size=(3, 6))
        np.testing.assert_allclose(estimate_psi(omega, rng.random(6) + 0.01).sum(axis=1), 1.0, atol=1e-12)


def test_make_prior():
    np.testing.assert_array_equal(make_prior(3), [1, 1, 1])
    with pytest.raises(InvalidInputError):
        make_prior(2, [1.0, 0.0])


def test_nonoverlap_hand_case():
    psi = np.array([[0.6, 0.3, 0.1], [0.4, 0.7, 0.9]])
    (pruned,), dead = apply_nonoverlap([psi])
    np.testing.assert_array_equal(column_assignments(psi), [0, 1, 1])
    np.testing.assert_allclose(pruned, [[1, 0, 0], [0, 7 / 16, 9 / 16]], rtol=1e-15)
    assert dead == []


def test_nonoverlap_tie_goes_to_lower_group():
    (pruned,), _ = apply_nonoverlap([np.array([[0.5, 0.5], [0.5, 0.5]])])
    np.testing.assert_array_equal(pruned, [[0.5, 0.5], [0.0, 0.0]])


def test_nonoverlap_dead_row_warns(caplog):
    (pruned,), dead = apply_nonoverlap([np.array([[0.9, 0.9], [0.1, 0.1]])])
    assert dead == [(1, 1)]
    np.testing.assert_array_equal(pruned[1], 0.0)
    assert "lost all classes" in caplog.text


def test_nonoverlap_idempotent_and_one_group_per_column(rng):
    psis = init_psi(Hierarchy.from_groupings([[0, 1, 0, 2, 1]]))[:1]
    np.testing.assert_allclose(apply_nonoverlap(psis)[0][0], psis[0])
    for _ in range(100):
        psi = estimate_psi(rng.integers(0, 20, size=(3, 7)), np.ones(7))
        once = apply_nonoverlap([psi])[0]
        twice = apply_nonoverlap(once)[0]
        np.testing.assert_array_equal(once[0], twice[0])
        assert np.all(np.count_nonzero(once[0], axis=0) == 1)
