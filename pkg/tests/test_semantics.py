import time

import numpy as np
import pytest
from scipy.stats import ortho_group

from scr.errors import InvalidDimension, NonFiniteFeatures, ShapeError
from scr.kg import KnowledgeGraph, augment_graph
from scr.oracles import semantic_neighbors_oracle
from scr.semantics import semantic_neighbors, unify_features
from scr.synthetic import random_kg


def empty_kg(n):
    return augment_graph(KnowledgeGraph(np.zeros((0, 3)), n, 1))


def test_identity_is_orthonormal():
    G = unify_features(np.eye(4), 4).raw
    assert np.allclose(G @ G.T, np.eye(4), atol=1e-5)


def test_padding_columns_zero():
    X = np.random.default_rng(0).normal(size=(6, 2))
    out = unify_features(X, 4)
    assert np.all(out.raw[:, 2:] == 0)
    assert out.effective_rank == 2
    assert out.data.shape == (6, 4)


def test_gram_matches_best_rank_d():
    X = np.random.default_rng(1).normal(size=(50, 20))
    G = unify_features(X, 8, seed=3).raw
    U, s, _ = np.linalg.svd(X, full_matrices=False)
    best = (U[:, :8] * s[:8] ** 2) @ U[:, :8].T
    err = np.linalg.norm(G @ G.T - best) / np.linalg.norm(best)
    assert err < 1e-3


def test_randomized_path_on_wide_low_rank():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(300, 6)) @ rng.normal(size=(6, 200))
    G = unify_features(X, 8, seed=0).raw
    assert np.linalg.norm(G @ G.T - X @ X.T) / np.linalg.norm(X @ X.T) < 1e-6


def test_rows_are_layer_normalized():
    out = unify_features(np.random.default_rng(3).normal(size=(30, 10)), 6).data
    assert np.allclose(out.mean(axis=1), 0, atol=1e-5)
    assert np.allclose(out.var(axis=1), 1, atol=1e-5)


def test_zero_row_maps_to_zero():
    X = np.random.default_rng(4).normal(size=(5, 3))
    X[2] = 0
    out = unify_features(X, 3).data
    assert np.all(out[2] == 0)
    assert np.all(np.isfinite(out))


def test_rotation_invariance():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(40, 12))
    Q = ortho_group.rvs(12, random_state=7)
    a = unify_features(X, 6).raw
    b = unify_features(X @ Q, 6).raw
    assert np.allclose(a @ a.T, b @ b.T, atol=1e-4)


def test_scaling():
    X = np.random.default_rng(6).normal(size=(20, 7))
    a, b = unify_features(X, 5), unify_features(3.5 * X, 5)
    assert np.allclose(np.abs(b.raw), 3.5 * np.abs(a.raw), atol=1e-8)
    assert np.allclose(np.abs(a.data), np.abs(b.data), atol=1e-5)


def test_deterministic_given_seed():
    X = np.random.default_rng(8).normal(size=(400, 300))
    assert np.array_equal(unify_features(X, 16, seed=1).data, unify_features(X, 16, seed=1).data)


def test_unify_errors():
    with pytest.raises(NonFiniteFeatures):
        unify_features(np.array([[np.nan, 1.0]]), 2)
    with pytest.raises(InvalidDimension):
        unify_features(np.ones((2, 2)), 0)


def test_neighbors_example():
    sem = semantic_neighbors(np.array([[1.0, 0], [1, 0], [0, 1]]), empty_kg(3), 1, 0.5)
    assert [m.tolist() for m in sem.members] == [[1], [0], []]


def test_k_zero():
    U = np.random.default_rng(0).normal(size=(6, 3))
    assert semantic_neighbors(U, empty_kg(6), 0, 0.0).is_empty()


def test_ties_prefer_lower_index_and_zero_rows_excluded():
    U = np.array([[1.0, 0], [1, 0], [1, 0], [0, 0]])
    sem = semantic_neighbors(U, empty_kg(4), 1, 0.5)
    assert [m.tolist() for m in sem.members] == [[1], [0], [0], []]


def test_topological_neighbors_excluded():
    kg = augment_graph(KnowledgeGraph([(1, 0, 0)], 3, 1))
    sem = semantic_neighbors(np.array([[1.0, 0], [1, 0], [0.9, 0.1]]), kg, 1, 0.5)
    assert sem[0].tolist() == [2]
    assert sem[1].tolist() == [2]
    with pytest.raises(ShapeError):
        semantic_neighbors(np.ones((2, 2)), kg, 1, 0.5)


@pytest.mark.parametrize("seed", range(4))
def test_neighbors_match_brute_force_100(seed):
    rng = np.random.default_rng(seed)
    kg = augment_graph(random_kg(100, 3, 150, seed))
    U = unify_features(rng.normal(size=(100, 8)), 8).data
    k, delta = 5, float(rng.uniform(-0.2, 0.5))
    got = semantic_neighbors(U, kg, k, delta, block_size=37)
    want = semantic_neighbors_oracle(U, kg, k, delta)
    assert [m.tolist() for m in got.members] == want
    topo = kg.topological_neighbors()
    for i, (members, scores) in enumerate(zip(got.members, got.scores)):
        assert len(members) <= k and i not in members.tolist()
        assert all(s >= delta for s in scores)
        assert not set(members.tolist()) & topo[i]


def test_neighbor_extraction_wall_clock_10k():
    rng = np.random.default_rng(0)
    n = 10_000
    kg = augment_graph(random_kg(n, 2, 20_000, seed=1))
    U = unify_features(rng.normal(size=(n, 32)), 32).data
    start = time.perf_counter()
    sem = semantic_neighbors(U, kg, 5, 0.0)
    elapsed = time.perf_counter() - start
    assert len(sem) == n
    assert elapsed < 120, f"took {elapsed:.1f}s"
