import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypergroup import spectral as sp
from hypergroup.spectral import Grouping, SpectralConfig, StateHistoryWindow


def window_from(points, window_len=4):
    """Window whose agents sit still at ``points`` for ``window_len`` steps."""
    points = np.asarray(points, dtype=float)
    w = StateHistoryWindow(len(points), window_len, points.shape[1])
    for _ in range(window_len):
        w.push(points)
    return w


def random_graph(rng, n, p=0.5):
    upper = np.triu(rng.random((n, n)) < p, 1).astype(float)
    w = upper + upper.T
    # keep it connected through a ring so Ncut volumes stay positive
    for i in range(n):
        j = (i + 1) % n
        w[i, j] = w[j, i] = 1.0
    return w


def brute_force_ncut(w):
    n = len(w)
    best = np.inf
    for mask in range(1, 2 ** (n - 1)):
        labels = np.array([(mask >> i) & 1 for i in range(n)])
        best = min(best, sp.ncut(w, labels))
    return best


def block_graph(sizes):
    n = sum(sizes)
    w = np.zeros((n, n))
    start = 0
    for s in sizes:
        w[start:start + s, start:start + s] = 1.0
        start += s
    np.fill_diagonal(w, 0.0)
    return w


# -- window ---------------------------------------------------------------------------
def test_window_normalizes_and_pads():
    w = StateHistoryWindow(2, 3, 2)
    w.push(np.array([[1.0, 10.0], [3.0, 30.0]]))
    assert len(w) == 1
    traj = w.trajectories()
    assert traj.shape == (2, 6)
    assert np.all(traj[:, :4] == 0.0)
    assert np.allclose(traj[:, 4:], [[-1, -1], [1, 1]], atol=1e-6)


def test_window_rejects_wrong_shape():
    with pytest.raises(ValueError):
        StateHistoryWindow(2, 3, 2).push(np.zeros((3, 2)))


def test_window_keeps_last_entries_only():
    w = StateHistoryWindow(1, 2, 1)
    for v in range(5):
        w.push(np.array([[float(v)]]))
    assert len(w.buffer[0]) == 2


# -- kNN graph ------------------------------------------------------------------------
def test_knn_two_identical_agents():
    g = sp.build_knn_similarity(window_from([[0.0, 0.0], [0.0, 0.0]]), 1)
    assert np.array_equal(g.weights, [[0, 1], [1, 0]])


def test_knn_two_blocks():
    g = sp.build_knn_similarity(window_from([[0, 0], [0, 1], [10, 0], [10, 1]]), 1)
    assert np.array_equal(g.weights, block_graph([2, 2]))


def test_knn_three_agents_complete():
    g = sp.build_knn_similarity(window_from([[0.0], [1.0], [5.0]]), 2)
    assert np.array_equal(g.weights, 1 - np.eye(3))


def test_knn_rejects_empty_window_and_bad_k():
    with pytest.raises(ValueError):
        sp.build_knn_similarity(StateHistoryWindow(3, 4, 2), 1)
    with pytest.raises(ValueError):
        sp.build_knn_similarity(window_from([[0.0], [1.0]]), 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(3, 8), st.integers(1, 2))
def test_knn_graph_invariants(seed, n, knn):
    traj = np.random.default_rng(seed).normal(size=(n, 6))
    w = sp.build_knn_similarity(traj, knn).weights
    assert np.array_equal(w, w.T)
    assert np.all(np.diag(w) == 0)
    dist = sp.pairwise_distances(traj)
    np.fill_diagonal(dist, np.inf)
    near = np.zeros((n, n), dtype=bool)
    for i in range(n):
        near[i, np.argsort(dist[i], kind="stable")[:knn]] = True
    assert np.array_equal(w > 0, near | near.T)


# -- Laplacian and eigensolver ------------------------------------------------------------
def test_laplacian_two_nodes():
    assert np.allclose(sp.normalized_laplacian(np.array([[0.0, 1.0], [1.0, 0.0]])), [[1, -1], [-1, 1]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 8))
def test_laplacian_spectrum_and_null_space(seed, n):
    w = random_graph(np.random.default_rng(seed), n)
    lap = sp.normalized_laplacian(w)
    vals, vecs = sp.eigh(lap)
    assert vals[0] == pytest.approx(0.0, abs=1e-8)
    assert vals[-1] <= 2.0 + 1e-8
    null = np.sqrt(w.sum(axis=1))
    null /= np.linalg.norm(null)
    assert abs(abs(vecs[:, 0] @ null) - 1.0) < 1e-8


def test_laplacian_two_components_double_zero():
    vals, _ = sp.eigh(sp.normalized_laplacian(block_graph([3, 2])))
    assert np.allclose(vals[:2], 0.0, atol=1e-9)
    assert vals[2] > 0.1


def test_laplacian_isolated_node_gets_self_loop():
    w = block_graph([2, 1])
    lap = sp.normalized_laplacian(w)
    assert np.all(np.isfinite(lap))
    assert lap[2, 2] == pytest.approx(0.0, abs=1e-12)


def test_eigh_identity():
    vals, vecs = sp.eigh(np.eye(3))
    assert np.allclose(vals, [1, 1, 1])
    assert np.allclose(vecs.T @ vecs, np.eye(3))


def test_eigh_analytic_2x2():
    vals, vecs = sp.eigh(np.array([[2.0, 1.0], [1.0, 2.0]]))
    assert np.allclose(vals, [1, 3], atol=1e-12)
    assert abs(vecs[0, 0] + vecs[1, 0]) < 1e-12
    assert abs(vecs[0, 1] - vecs[1, 1]) < 1e-12


def test_eigh_rejects_asymmetric():
    with pytest.raises(ValueError):
        sp.eigh(np.array([[1.0, 2.0], [0.0, 1.0]]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 10))
def test_eigh_reconstruction(seed, n):
    a = np.random.default_rng(seed).normal(size=(n, n))
    m = a + a.T
    vals, vecs = sp.eigh(m)
    assert np.all(np.diff(vals) >= 0)
    assert np.max(np.abs(vecs @ np.diag(vals) @ vecs.T - m)) < 1e-8
    assert np.max(np.abs(vecs.T @ vecs - np.eye(n))) < 1e-8
    assert np.max(np.abs(m @ vecs - vecs * vals)) < 1e-8
    assert np.allclose(vals, np.linalg.eigvalsh(m), atol=1e-8)


# -- embedding ------------------------------------------------------------------------------
def test_embed_k1_unit_entries():
    emb = sp.spectral_embed(sp.normalized_laplacian(random_graph(np.random.default_rng(0), 6)), 1)
    assert np.allclose(np.abs(emb), 1.0)


def test_embed_block_graph_rows_match_components():
    emb = sp.spectral_embed(sp.normalized_laplacian(block_graph([3, 3])), 2)
    assert np.allclose(emb[0], emb[1]) and np.allclose(emb[1], emb[2])
    assert np.allclose(emb[3], emb[4]) and np.allclose(emb[4], emb[5])
    assert not np.allclose(emb[0], emb[3])


def test_embed_full_basis_unit_rows():
    emb = sp.spectral_embed(sp.normalized_laplacian(random_graph(np.random.default_rng(1), 5)), 5)
    assert np.allclose(np.linalg.norm(emb, axis=1), 1.0)


def test_embed_rejects_k_too_large():
    with pytest.raises(ValueError):
        sp.spectral_embed(np.eye(3), 4)


# -- k-means and silhouette -----------------------------------------------------------------------
def test_kmeans_line_matches_brute_force():
    pts = np.array([[0.0], [0.1], [10.0], [10.1]])
    labels = sp.kmeans(pts, 2, seed=0)
    best = min((sp.wcss(pts, np.array(lab)), lab)
               for lab in itertools.product([0, 1], repeat=4) if len(set(lab)) == 2)
    assert sp.wcss(pts, labels) == pytest.approx(best[0])
    assert labels[0] == labels[1] != labels[2] == labels[3]


def test_kmeans_k_equals_n():
    pts = np.random.default_rng(0).normal(size=(5, 2))
    labels = sp.kmeans(pts, 5, seed=1)
    assert sorted(labels) == list(range(5))
    assert sp.wcss(pts, labels) == 0.0


def test_kmeans_identical_points():
    labels = sp.kmeans(np.ones((4, 2)), 2, seed=0)
    assert set(labels) == {0, 1}
    assert sp.wcss(np.ones((4, 2)), labels) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 4))
def test_kmeans_deterministic_and_nonempty(seed, k):
    pts = np.random.default_rng(seed).normal(size=(7, 3))
    a = sp.kmeans(pts, k, restarts=3, seed=seed)
    b = sp.kmeans(pts, k, restarts=3, seed=seed)
    assert np.array_equal(a, b)
    assert set(a) == set(range(k))


def test_silhouette_tight_pairs():
    pts = np.array([[0.0], [0.01], [100.0], [100.01]])
    assert sp.silhouette(pts, [0, 0, 1, 1]) > 0.99
    assert sp.silhouette(pts, [0, 1, 0, 1]) < 0


def test_silhouette_identical_points_zero():
    assert sp.silhouette(np.zeros((4, 2)), [0, 0, 1, 1]) == 0.0


def test_silhouette_rejects_single_group():
    with pytest.raises(ValueError):
        sp.silhouette(np.zeros((3, 1)), [0, 0, 0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000))
def test_silhouette_blobs_beat_random_labeling(seed):
    rng = np.random.default_rng(seed)
    pts = np.vstack([rng.normal(0, 0.1, (5, 2)), rng.normal(10, 0.1, (5, 2))])
    truth = np.repeat([0, 1], 5)
    labels = rng.permutation(truth)
    if np.array_equal(labels, truth) or np.array_equal(labels, 1 - truth):
        return
    assert sp.silhouette(pts, truth) > sp.silhouette(pts, labels)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 8), st.integers(2, 4))
def test_silhouette_in_range(seed, n, k):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % min(k, n)
    s = sp.silhouette_samples(rng.normal(size=(n, 2)), labels)
    assert np.all((-1 <= s) & (s <= 1))


# -- cluster -------------------------------------------------------------------------------------
def test_cluster_two_pairs_picks_k2():
    cfg = SpectralConfig(k_min=2, k_max=3, knn=1)
    g = sp.cluster(window_from([[0, 0], [0, 1], [10, 0], [10, 1]]), cfg)
    assert g.k == 2
    assert np.array_equal(g.labels, [0, 0, 1, 1])
    assert np.all((-1 <= g.cohesion) & (g.cohesion <= 1))


def test_cluster_identical_trajectories_tie_keeps_smallest_k():
    cfg = SpectralConfig(k_min=2, k_max=4, knn=2)
    g = sp.cluster(window_from(np.zeros((5, 2))), cfg)
    assert g.k == 2


def test_cluster_two_agents_singletons():
    g = sp.cluster(window_from([[0.0], [1.0]]), SpectralConfig(k_min=2, k_max=2, knn=1))
    assert g.k == 2
    assert np.array_equal(g.cohesion, [0.0, 0.0])


def test_cluster_one_agent_single_group():
    g = sp.cluster(window_from([[0.0]]), SpectralConfig())
    assert g.k == 1 and np.array_equal(g.labels, [0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000), st.integers(3, 8))
def test_cluster_grouping_invariants(seed, n):
    rng = np.random.default_rng(seed)
    cfg = SpectralConfig(k_min=2, k_max=min(4, n), knn=2, seed=seed)
    w = StateHistoryWindow(n, 3, 2)
    for _ in range(3):
        w.push(rng.normal(size=(n, 2)))
    g = sp.cluster(w, cfg)
    assert 2 <= g.k <= cfg.k_max
    assert set(g.labels) == set(range(g.k))
    assert np.all((-1 <= g.cohesion) & (g.cohesion <= 1))


# -- Ncut -----------------------------------------------------------------------------------------------
def test_ncut_block_partition_zero():
    assert sp.ncut(block_graph([2, 3]), [0, 0, 1, 1, 1]) == 0.0


def test_ncut_single_edge_split():
    assert sp.ncut(np.array([[0.0, 1.0], [1.0, 0.0]]), [0, 1]) == 2.0


def test_ncut_rejects_wrong_length():
    with pytest.raises(ValueError):
        sp.ncut(np.zeros((3, 3)), [0, 1])


def test_ncut_zero_volume_group_contributes_zero():
    assert sp.ncut(np.zeros((3, 3)), [0, 1, 1]) == 0.0


def test_ncut_random_six_node_graph_near_optimal():
    rng = np.random.default_rng(6)
    w = random_graph(rng, 6)
    cfg = SpectralConfig(k_min=2, k_max=2)
    g = sp.cluster_graph(sp.SimilarityGraph(w), cfg)
    assert sp.ncut(w, g.labels) <= 1.5 * brute_force_ncut(w)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000), st.integers(3, 8))
def test_ncut_bound_on_random_graphs(seed, n):
    w = random_graph(np.random.default_rng(seed), n)
    g = sp.cluster_graph(sp.SimilarityGraph(w), SpectralConfig(k_min=2, k_max=2, seed=seed))
    assert sp.ncut(w, g.labels) <= brute_force_ncut(w) * (1 + 2 * np.log(2)) + 1e-12


# -- eta and the update rule ------------------------------------------------------------------------------------
def test_eta_examples():
    assert sp.eta(np.array([0, 0, 1, 1]), np.array([1, 1, 0, 0])) == 0.0
    assert sp.eta(np.array([0, 0, 1, 1]), np.array([0, 1, 1, 0])) == 0.5
    assert sp.eta(np.array([0, 1, 2, 0]), np.array([0, 1, 2, 0])) == 0.0


def test_eta_rejects_different_lengths():
    with pytest.raises(ValueError):
        sp.eta(np.array([0, 1]), np.array([0, 1, 1]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=8), st.data())
def test_eta_permutation_invariance(prev, data):
    prev = np.array(prev)
    nxt = np.array(data.draw(st.lists(st.integers(0, 3), min_size=len(prev), max_size=len(prev))))
    perm = np.array(data.draw(st.permutations(range(4))))
    e = sp.eta(prev, nxt)
    assert 0.0 <= e <= 1.0
    assert sp.eta(perm[prev], nxt) == pytest.approx(e)
    assert sp.eta(prev, perm[nxt]) == pytest.approx(e)
    assert sp.eta(nxt, prev) == pytest.approx(e)


def _grouping(labels, version=0):
    labels = np.asarray(labels)
    k = int(labels.max()) + 1
    return Grouping(labels, k, np.zeros(k), version=version)


def test_update_rule_keeps_identical_candidate():
    prev = _grouping([0, 0, 1, 1, 1], version=3)
    out = sp.update_rule(prev, _grouping([1, 1, 0, 0, 0]), 0.8)
    assert out.version == 3 and out.eta_last == 0.0
    assert np.array_equal(out.labels, prev.labels)


def test_update_rule_retains_small_change():
    prev = _grouping([0, 0, 0, 1, 1])
    cand = _grouping([0, 1, 1, 1, 1])
    out = sp.update_rule(prev, cand, 0.8)
    assert out.eta_last == pytest.approx(0.4)
    assert out.version == 0 and np.array_equal(out.labels, prev.labels)


def test_update_rule_adopts_large_change():
    prev = _grouping([0, 0, 0, 0, 0, 0], version=1)
    cand = _grouping([0, 1, 2, 3, 4, 5])
    out = sp.update_rule(prev, cand, 0.8)
    assert out.eta_last == pytest.approx(5 / 6)
    assert out.version == 2 and np.array_equal(out.labels, cand.labels)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=5, max_size=5), st.lists(st.integers(0, 4), min_size=5, max_size=5))
def test_five_agents_can_never_all_move(prev, nxt):
    # matched labels always keep at least one agent in place
    assert sp.eta(np.array(prev), np.array(nxt)) <= 0.8


def test_maybe_update_idempotent_on_frozen_window():
    rng = np.random.default_rng(3)
    w = StateHistoryWindow(6, 4, 2)
    for _ in range(4):
        w.push(rng.normal(size=(6, 2)))
    frozen = w.freeze()
    cfg = SpectralConfig(k_min=2, k_max=3, delta=0.3, seed=1)
    once = sp.maybe_update(sp.single_group(6), frozen, cfg)
    twice = sp.maybe_update(once, frozen, cfg)
    assert twice.version == once.version
    assert np.array_equal(twice.labels, once.labels)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 100_000), st.floats(0.0, 1.0))
def test_version_never_decreases(seed, delta):
    rng = np.random.default_rng(seed)
    cfg = SpectralConfig(k_min=2, k_max=3, delta=delta, seed=seed)
    w = StateHistoryWindow(5, 3, 2)
    g = sp.single_group(5)
    for _ in range(6):
        w.push(rng.normal(size=(5, 2)))
        nxt = sp.maybe_update(g, w, cfg)
        assert nxt.version in (g.version, g.version + 1)
        g = nxt


# -- potential -------------------------------------------------------------------------------------------
def test_potential_examples():
    states = np.array([[0.0, 0.0], [2.0, 0.0], [5.0, 5.0]])
    assert sp.potential(_grouping([0, 1, 2]), states) == 0.0
    assert sp.potential(_grouping([0, 0, 1]), states) == 4.0
    assert sp.potential(_grouping([0, 0, 0]), np.ones((3, 2))) == 0.0
