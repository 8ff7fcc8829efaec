import json

import numpy as np
import pytest

from lmm.dataset import Dataset, SynthSpec, generate_synthetic
from lmm.exceptions import InvalidInputError
from lmm.feature_net import init_feature_net
from lmm.hierarchy import (Hierarchy, HierarchyConfig, agglomerate, build_hierarchy,
                           class_representations, cut_merges, init_psi, permute_groups,
                           psi_from_json, psi_to_json, similarity_matrix)
from lmm.trainer import purity


def test_class_means_raw():
    d = Dataset([[0, 0], [2, 2], [4, 0], [6, 2]], [0, 0, 1, 1], 2)
    reps = class_representations(d)
    np.testing.assert_allclose(reps[0].vector, [1, 1])
    np.testing.assert_allclose(reps[1].vector, [5, 1])


def test_class_means_through_net(rng):
    d = Dataset(rng.normal(size=(6, 3)), [0, 1, 2, 0, 1, 2], 3)
    net = init_feature_net(3, (4,), rng=rng)
    feats = net.forward(d.inputs)[0]
    reps = class_representations(d, net)
    np.testing.assert_allclose(reps[2].vector, feats[[2, 5]].mean(axis=0))


def test_empty_class_rejected():
    d = Dataset([[0.0], [1.0]], [0, 0], 2)
    with pytest.raises(InvalidInputError, match=r"\[1\]"):
        class_representations(d)


def test_three_equidistant_classes_give_exp_minus_one():
    # equilateral triangle with side 2: every sigma is 2, every off-diagonal exp(-1)
    X = np.array([[0, 0], [2, 0], [1, np.sqrt(3)]])
    sim = similarity_matrix(X, HierarchyConfig(self_tune_k=1))
    np.testing.assert_allclose(sim.sigmas, [2, 2, 2])
    expected = np.full((3, 3), np.exp(-1))
    np.fill_diagonal(expected, 1.0)
    np.testing.assert_allclose(sim.values, expected, rtol=1e-14)


def test_similarity_hand_example():
    # points on a line at 0, 1, 3; k=1 -> sigmas 1, 1, 2
    X = np.array([[0.0], [1.0], [3.0]])
    sim = similarity_matrix(X, HierarchyConfig(self_tune_k=1))
    np.testing.assert_allclose(sim.sigmas, [1, 1, 2])
    assert sim.values[0, 1] == pytest.approx(np.exp(-1.0))
    assert sim.values[0, 2] == pytest.approx(np.exp(-3.0 / np.sqrt(2)))
    assert sim.values[1, 2] == pytest.approx(np.exp(-2.0 / np.sqrt(2)))
    np.testing.assert_array_equal(sim.values, sim.values.T)


def test_similarity_bounds_and_k_range(rng):
    X = rng.normal(size=(8, 5))
    S = similarity_matrix(X, HierarchyConfig(self_tune_k=3)).values
    off = S[~np.eye(8, dtype=bool)]
    assert np.all((off > 0) & (off < 1))
    for k in (0, 8):
        with pytest.raises(InvalidInputError):
            similarity_matrix(X, HierarchyConfig(self_tune_k=k))


def test_duplicate_representations_fall_back_with_warning(caplog):
    X = np.array([[0.0], [0.0], [4.0]])
    sim = similarity_matrix(X, HierarchyConfig(self_tune_k=1))
    assert "zero local scale" in caplog.text
    assert np.all(sim.sigmas > 0) and np.all(np.isfinite(sim.values))


def test_two_group_cut_matches_brute_force_on_clear_clusters(rng):
    # two well separated blobs: best 2-partition by between-group similarity is unique
    for trial in range(5):
        a = rng.normal(0, 0.3, size=(3, 2))
        b = rng.normal(6, 0.3, size=(4, 2))
        X = np.vstack([a, b])[rng.permutation(7)]
        S = similarity_matrix(X, HierarchyConfig(self_tune_k=2)).values
        best, best_val = None, np.inf
        for mask in range(1, 2 ** 6):
            g1 = [0] + [i + 1 for i in range(6) if mask >> i & 1]
            g2 = [i for i in range(7) if i not in g1]
            if not g2:
                continue
            val = S[np.ix_(g1, g2)].mean()
            if val < best_val:
                best, best_val = (g1, g2), val
        m = cut_merges(agglomerate(S), 7, 2)
        got = {tuple(np.flatnonzero(m == t)) for t in range(2)}
        assert got == {tuple(best[0]), tuple(best[1])}


def test_agglomerate_tie_break_is_lowest_pair():
    S = np.ones((4, 4))
    merges = agglomerate(S)
    assert merges[0] == (0, 1)
    np.testing.assert_array_equal(cut_merges(merges, 4, 3), [0, 0, 1, 2])


def test_complete_linkage_differs_from_average():
    S = np.array([[1.0, 0.9, 0.1, 0.8],
                  [0.9, 1.0, 0.6, 0.1],
                  [0.1, 0.6, 1.0, 0.2],
                  [0.8, 0.1, 0.2, 1.0]])
    # after (0, 1): average gives 3 -> 0.45 vs complete 0.1, so the second merge differs
    assert agglomerate(S, "average")[:2] == [(0, 1), (0, 3)]
    assert agglomerate(S, "complete")[:2] == [(0, 1), (2, 3)]
    with pytest.raises(InvalidInputError):
        agglomerate(S, "single")


def test_level_sizes():
    assert HierarchyConfig(1).level_sizes(10) == [10]
    assert HierarchyConfig(3, group_counts=(2, 5)).level_sizes(10) == [2, 5, 10]
    assert HierarchyConfig(3, branching=2).level_sizes(10) == [2, 4, 10]
    assert HierarchyConfig(2, group_counts=(10,)).level_sizes(10) == [10, 10]
    for bad in [HierarchyConfig(3, group_counts=(5, 2)), HierarchyConfig(2, group_counts=(11,)),
                HierarchyConfig(0), HierarchyConfig(3, group_counts=(2,))]:
        with pytest.raises(InvalidInputError):
            bad.level_sizes(10)


def test_single_level_is_flat(rng):
    S = similarity_matrix(rng.normal(size=(5, 2)), HierarchyConfig(self_tune_k=2))
    h = build_hierarchy(S, HierarchyConfig(1))
    assert h.depth == 1
    np.testing.assert_array_equal(init_psi(h)[0], np.eye(5))


def test_n_groups_at_upper_level_is_identity(rng):
    S = similarity_matrix(rng.normal(size=(5, 2)), HierarchyConfig(self_tune_k=2))
    h = build_hierarchy(S, HierarchyConfig(2, group_counts=(5,)))
    np.testing.assert_array_equal(h.memberships[0], np.arange(5))


def test_built_hierarchy_is_nested_and_deterministic(rng):
    X = rng.normal(size=(12, 3))
    cfg = HierarchyConfig(4, group_counts=(2, 3, 6), self_tune_k=3)
    h1 = build_hierarchy(similarity_matrix(X, cfg), cfg)
    h2 = build_hierarchy(similarity_matrix(X, cfg), cfg)
    assert h1.group_counts() == [2, 3, 6, 12]
    assert h1.nesting_violations() == 0
    assert h1.to_json() == h2.to_json()


def test_init_psi_values():
    h = Hierarchy.from_groupings([[0, 0, 1, 0, 1]])
    psi = init_psi(h)
    np.testing.assert_allclose(psi[0], [[1 / 3, 1 / 3, 0, 1 / 3, 0], [0, 0, 0.5, 0, 0.5]])
    np.testing.assert_array_equal(psi[1], np.eye(5))
    for p in psi:
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-15)


def test_json_round_trip(tmp_path):
    h = Hierarchy.from_groupings([[1, 1, 0, 0, 2], [0, 0, 1, 1, 1]])
    h.save(tmp_path / "h.json")
    back = Hierarchy.load(tmp_path / "h.json")
    for a, b in zip(h.memberships, back.memberships):
        np.testing.assert_array_equal(a, b)
    data = json.loads((tmp_path / "h.json").read_text())
    assert data["depth"] == 3 and data["levels"][0]["groups"][0] == {"id": 0, "classes": [0, 1]}
    psis = init_psi(h)
    for a, b in zip(psis, psi_from_json(json.loads(json.dumps(psi_to_json(psis))))):
        np.testing.assert_array_equal(a, b)


def test_json_rejects_repeated_class():
    data = {"depth": 1, "levels": [{"level": 1, "groups": [{"id": 0, "classes": [0, 0]}]}]}
    with pytest.raises(InvalidInputError):
        Hierarchy.from_json(data)


def test_nesting_violation_counted():
    h = Hierarchy([[0, 0, 1, 1], [0, 1, 1, 2], [0, 1, 2, 3]])
    assert h.nesting_violations() == 1


def test_canonical_group_order():
    h = Hierarchy.from_groupings([[2, 2, 0, 1]])
    np.testing.assert_array_equal(h.memberships[0], [0, 0, 1, 2])


@pytest.mark.parametrize("seed", range(3))
def test_planted_superclusters_recovered(seed):
    data, planted = generate_synthetic(SynthSpec(4, 5, 16, 1.0, 5.0, 100, seed))
    cfg = HierarchyConfig(2, group_counts=(4,))
    h = build_hierarchy(similarity_matrix(class_representations(data), cfg), cfg)
    assert purity(h.memberships[0], planted.class_to_supercluster) == 1.0


def test_permute_groups_moves_requested_classes():
    grouping = np.repeat(np.arange(4), 5)
    new, moved = permute_groups(grouping, 0.2, seed=0)
    assert len(moved) == 4
    assert np.flatnonzero(new != grouping).tolist() == moved
    assert len({int(grouping[c]) for c in moved}) == 4
    again, moved2 = permute_groups(grouping, 0.2, seed=0)
    np.testing.assert_array_equal(new, again)
    assert moved == moved2
