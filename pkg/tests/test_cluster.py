import itertools

import numpy as np
import pytest

from fluxlattice.cluster import (
    ApConfig,
    KMeansConfig,
    ap_fit,
    ap_for_k,
    cluster_protocol,
    kmeans_fit,
    median_preference,
    similarity_matrix,
    sizes_string,
)
from fluxlattice.errors import ConfigError, ValidationError
from fluxlattice.simindex import adjusted_rand_index


def blobs(n_per=(12, 8), sep=10.0, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    pts, labels = [], []
    for j, n in enumerate(n_per):
        pts.append(rng.normal(size=(n, dim)) + sep * j)
        labels += [j] * n
    return np.vstack(pts), np.array(labels)


def _partition(labels):
    groups = {}
    for i, l in enumerate(labels):
        groups.setdefault(int(l), []).append(i)
    return sorted(sorted(g) for g in groups.values())


def best_ap_partition(s, pref):
    """Exhaustive net-similarity maximization over exemplar sets."""
    n = len(s)
    best = None
    for r in range(1, n + 1):
        for ex in itertools.combinations(range(n), r):
            assign = [i if i in ex else max(ex, key=lambda e: s[i, e]) for i in range(n)]
            score = sum(pref if assign[i] == i else s[i, assign[i]] for i in range(n))
            if best is None or score > best[0] + 1e-12:
                best = (score, assign)
    return _partition(best[1])


def test_ap_three_points_matches_exhaustive():
    x = np.array([[0.0], [1.0], [10.0]])
    s = similarity_matrix(x)
    assert s.tolist() == [[0.0, -1.0, -100.0], [-1.0, 0.0, -81.0], [-100.0, -81.0, 0.0]]
    res = ap_fit(s, ApConfig(preference=-25.0, damping=0.5), points=x)
    assert _partition(res.clustering.labels) == [[0, 1], [2]] == best_ap_partition(s, -25.0)
    assert res.converged


@pytest.mark.parametrize("seed", range(10))
def test_ap_separated_groups_reach_exhaustive_optimum(seed):
    # a long stability window lets the messages settle past early transients
    rng = np.random.default_rng(seed)
    x = np.vstack([rng.normal(size=(3, 2)), rng.normal(size=(3, 2)) + 20])
    s = similarity_matrix(x)
    cfg = dict(convergence_iter=200, max_iter=5000)
    for pref in (median_preference(s), -10.0):
        res = ap_fit(s, ApConfig(preference=pref, **cfg))
        assert _partition(res.clustering.labels) == best_ap_partition(s, pref)


def test_ap_assignment_is_nearest_exemplar():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(15, 2))
    s = similarity_matrix(x)
    res = ap_fit(s)
    ex = np.array(res.exemplars)
    labels = res.clustering.labels
    for i in range(len(x)):
        if i in ex:
            assert ex[labels[i]] == i
        else:
            assert s[i, ex[labels[i]]] == s[i, ex].max()


def test_ap_exemplars_are_data_points():
    x, truth = blobs()
    res = ap_fit(similarity_matrix(x), ApConfig(preference=3.0 * similarity_matrix(x).min()), points=x)
    assert adjusted_rand_index(res.clustering.labels, truth) == 1.0
    for j, e in enumerate(res.exemplars):
        np.testing.assert_array_equal(res.clustering.representatives[j], x[e])
        assert res.clustering.labels[e] == j


def test_ap_single_point_and_validation():
    res = ap_fit(np.zeros((1, 1)))
    assert res.clustering.k == 1
    with pytest.raises(ValidationError):
        ap_fit(np.zeros((2, 3)))
    with pytest.raises(ConfigError):
        ApConfig(damping=0.3)


def test_median_preference():
    s = similarity_matrix(np.array([[0.0], [1.0], [3.0]]))
    assert median_preference(s) == -4.0


def test_ap_for_k_hits_two():
    x, truth = blobs(seed=3)
    res = ap_for_k(similarity_matrix(x), 2)
    assert res.clustering.k == 2


def sse(x, labels):
    return sum(((x[labels == j] - x[labels == j].mean(0)) ** 2).sum() for j in np.unique(labels))


def test_kmeans_global_optimum_small():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(9, 2))
    best = min(
        sse(x, np.array(lab))
        for lab in itertools.product([0, 1], repeat=9)
        if 0 < sum(lab) < 9
    )
    res = kmeans_fit(x, KMeansConfig(k=2, restarts=20, seed=1))
    assert res.inertia == pytest.approx(best, rel=1e-12)


def test_kmeans_history_non_increasing_and_centroids():
    x, truth = blobs(seed=2)
    res = kmeans_fit(x, KMeansConfig(k=2, seed=5))
    h = np.array(res.inertia_history)
    assert np.all(np.diff(h) <= 1e-9 * h[0])
    labels = res.clustering.labels
    for j in range(2):
        np.testing.assert_allclose(res.clustering.representatives[j], x[labels == j].mean(0), atol=1e-12)
    assert adjusted_rand_index(labels, truth) == 1.0
    assert labels[0] == 0


def test_kmeans_k_equals_n_and_k_one():
    x = np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]])
    res = kmeans_fit(x, KMeansConfig(k=3))
    assert res.inertia == 0.0 and sorted(res.clustering.sizes) == [1, 1, 1]
    one = kmeans_fit(x, KMeansConfig(k=1))
    np.testing.assert_allclose(one.clustering.representatives[0], x.mean(0))
    with pytest.raises(ConfigError):
        kmeans_fit(x, KMeansConfig(k=4))


def test_kmeans_duplicate_points_no_empty_cluster():
    x = np.array([[0.0]] * 5 + [[1.0]] * 2 + [[7.0]])
    res = kmeans_fit(x, KMeansConfig(k=3, restarts=5))
    assert sorted(res.clustering.sizes) == [1, 2, 5]


def test_kmeans_deterministic_and_order_invariant():
    x, truth = blobs(seed=4)
    a = kmeans_fit(x, KMeansConfig(seed=9))
    b = kmeans_fit(x, KMeansConfig(seed=9))
    assert a.clustering == b.clustering and a.inertia == b.inertia
    perm = np.random.default_rng(0).permutation(len(x))
    c = kmeans_fit(x[perm], KMeansConfig(seed=3))
    assert adjusted_rand_index(c.clustering.labels, truth[perm]) == 1.0


def test_kmeans_translation_invariance():
    x, _ = blobs(seed=6)
    a = kmeans_fit(x, KMeansConfig(seed=2))
    b = kmeans_fit(x + 100.0, KMeansConfig(seed=2))
    np.testing.assert_array_equal(a.clustering.labels, b.clustering.labels)


def test_protocol_report():
    x, truth = blobs(n_per=(13, 7), seed=8)
    keys = [f"k{i}" for i in range(len(x))]
    s = similarity_matrix(x)
    ckm, cap, report = cluster_protocol(x, KMeansConfig(), ApConfig(preference=3 * s.min()), keys)
    assert report["sizes"] == {"kmeans": "13+7", "affinity_propagation": "13+7"}
    assert report["scores"]["ARI"] == 1.0
    assert sizes_string(ckm) == "13+7"
    assert ckm.keys == tuple(keys)


def test_ap_two_tight_blobs_median_preference():
    rng = np.random.default_rng(12)
    x = np.vstack([rng.normal(scale=0.1, size=(10, 4)), rng.normal(scale=0.1, size=(10, 4)) + 5.0])
    truth = np.repeat([0, 1], 10)
    res = ap_fit(similarity_matrix(x))
    assert adjusted_rand_index(res.clustering.labels, truth) == 1.0


@pytest.mark.parametrize("shift", [-50.0, 10.0])
def test_ap_invariant_to_common_shift(shift):
    x, _ = blobs(seed=13)
    s = similarity_matrix(x)
    pref = 3.0 * s.min()
    a = ap_fit(s, ApConfig(preference=pref)).clustering.labels
    b = ap_fit(s + shift, ApConfig(preference=pref + shift)).clustering.labels
    np.testing.assert_array_equal(a, b)
