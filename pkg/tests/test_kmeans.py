import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pqaccel.errors import DataError, ParameterError
from pqaccel.kmeans import VqCodebook, assign_nearest, kmeans, squared_distances, vq_quantize


def brute_force_two_partition(X):
    """Best objective over every split of the columns into two non-empty groups."""
    n = X.shape[1]
    best = (np.inf, None)
    for mask in itertools.product([0, 1], repeat=n):
        mask = np.array(mask, dtype=bool)
        if mask.all() or not mask.any():
            continue
        a, b = X[:, mask], X[:, ~mask]
        obj = float(((a - a.mean(1, keepdims=True)) ** 2).sum() + ((b - b.mean(1, keepdims=True)) ** 2).sum())
        if obj < best[0]:
            best = (obj, (a.mean(1), b.mean(1)))
    return best


def test_exact_cover(rng):
    X = rng.normal(size=(3, 6))
    res = kmeans(X, 6, seed=0)
    assert res.objective == 0.0
    np.testing.assert_array_equal(np.sort(res.centroids, axis=1), np.sort(X, axis=1))


def test_single_cluster_is_mean(rng):
    X = rng.normal(size=(4, 20))
    res = kmeans(X, 1)
    np.testing.assert_allclose(res.centroids[:, 0], X.mean(axis=1), atol=1e-12)
    assert res.objective == pytest.approx(float(X.var(axis=1).sum() * 20), rel=1e-12)


def test_toy_set_matches_brute_force():
    X = np.array([[0, 0, 10, 10], [0, 1, 0, 1]], dtype=float)
    oracle_obj, oracle_centres = brute_force_two_partition(X)
    assert oracle_obj == 1.0
    res = kmeans(X, 2, seed=3)
    assert res.objective == pytest.approx(oracle_obj, abs=1e-12)
    got = sorted(map(tuple, res.centroids.T))
    assert got == sorted(map(tuple, oracle_centres)) == [(0.0, 0.5), (10.0, 0.5)]


@pytest.mark.parametrize("seed", range(5))
def test_small_sets_reach_brute_force_optimum_from_good_start(seed):
    r = np.random.default_rng(seed)
    X = np.hstack([r.normal(0, 0.3, (2, 4)), r.normal(5, 0.3, (2, 4))])
    oracle_obj, _ = brute_force_two_partition(X)
    assert kmeans(X, 2, seed=seed).objective == pytest.approx(oracle_obj, rel=1e-9)


def test_matches_sklearn_with_identical_init():
    sklearn = pytest.importorskip("sklearn.cluster")
    r = np.random.default_rng(7)
    X = r.normal(size=(4, 64))
    init = X[:, r.choice(64, 8, replace=False)]
    ours = kmeans(X, 8, init=init, tol=0.0, max_iter=300)
    ref = sklearn.KMeans(8, init=init.T.copy(), n_init=1, tol=0.0, max_iter=300, algorithm="lloyd").fit(X.T)
    assert ours.objective == pytest.approx(ref.inertia_, rel=1e-5)
    cb = VqCodebook(ours.centroids, ours.assignments)
    assert np.linalg.norm(X - cb.reconstruct()) == pytest.approx(np.sqrt(ref.inertia_), rel=1e-5)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 10), d=st.integers(1, 5))
def test_objective_history_non_increasing(seed, k, d):
    X = np.random.default_rng(seed).normal(size=(d, 30))
    h = kmeans(X, k, seed=seed).objective_history
    assert all(b <= a for a, b in zip(h, h[1:]))


def test_assignments_optimal_at_convergence(rng):
    X = rng.normal(size=(3, 80))
    res = kmeans(X, 6, seed=1, tol=0.0, max_iter=500)
    dist = squared_distances(X, res.centroids)
    own = dist[np.arange(80), res.assignments]
    assert np.all(own <= dist.min(axis=1) + 1e-12)


def test_ties_go_to_lowest_index():
    X = np.array([[1.0]])
    C = np.array([[0.0, 2.0, 0.0]])
    idx, dist = assign_nearest(X, C)
    assert idx[0] == 0 and dist[0] == 1.0


def test_empty_cluster_is_reseeded():
    X = np.array([[0.0, 0.1, 10.0, 10.1]])
    init = np.array([[0.05, 10.05, 100.0]])  # third centroid attracts nothing
    res = kmeans(X, 3, init=init)
    assert len(set(res.assignments.tolist())) == 3


def test_deterministic(rng):
    X = rng.normal(size=(4, 50))
    a, b = kmeans(X, 5, seed=11), kmeans(X, 5, seed=11)
    assert a.centroids.tobytes() == b.centroids.tobytes()
    assert a.objective_history == b.objective_history


def test_errors(rng):
    with pytest.raises(ParameterError):
        kmeans(rng.normal(size=(2, 3)), 4)
    with pytest.raises(ParameterError):
        kmeans(rng.normal(size=(2, 3)), 0)
    bad = rng.normal(size=(2, 5))
    bad[0, 1] = np.nan
    with pytest.raises(DataError):
        kmeans(bad, 2)


def test_vq_error_equals_sqrt_objective(rng):
    X = rng.normal(size=(4, 64))
    cb = vq_quantize(X, 8, seed=2)
    res = kmeans(X, 8, seed=2)
    assert np.linalg.norm(X - cb.reconstruct()) == pytest.approx(np.sqrt(res.objective), rel=1e-12)
    g = cb.gamma()
    assert np.all(g.sum(axis=0) == 1)
    np.testing.assert_allclose(cb.codewords @ g, cb.reconstruct())


def test_vq_trivial_cases(rng):
    X = rng.normal(size=(3, 7))
    assert np.linalg.norm(X - vq_quantize(X, 7).reconstruct()) == 0.0
    one = vq_quantize(X, 1).reconstruct()
    np.testing.assert_allclose(one, np.repeat(X.mean(axis=1, keepdims=True), 7, axis=1), atol=1e-12)


def test_median_error_non_increasing_in_k():
    medians = []
    for k in (1, 2, 4, 8, 16):
        errs = [np.linalg.norm(X - vq_quantize(X, k, seed=s).reconstruct())
                for s in range(20) for X in [np.random.default_rng(s).normal(size=(4, 64))]]
        medians.append(np.median(errs))
    assert all(b <= a for a, b in zip(medians, medians[1:]))
