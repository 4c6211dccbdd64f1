import numpy as np
import pytest
from scipy.stats import spearmanr

import gst
from gst.graph import generate_sbm, weighted_adjacency_dense
from gst.spectral import (
    EigenSolverError,
    dense_eig_oracle,
    eigen_variation_scores,
    exact_variation_oracle,
    extremal_eig,
    first_order_edge_deltas,
    spectral_preservation,
)
from tests.conftest import make_graph


def _random_weighted_graph(seed, blocks=2, per_block=25):
    g, _, _ = generate_sbm(seed, blocks, per_block, 0.3, 0.06, 2, 0.0)
    rng = np.random.default_rng(seed + 1000)
    w = rng.uniform(0.2, 1.0, g.num_edges)
    return g, w


class TestDenseOracle:
    def test_identity(self):
        pairs = dense_eig_oracle(np.eye(3))
        assert np.allclose(pairs.values, [1.0, 1.0, 1.0])

    def test_two_node_closed_form(self):
        pairs = dense_eig_oracle(np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert np.allclose(pairs.values, [-1.0, 1.0], atol=1e-12)
        expected = np.array([1.0, 1.0]) / np.sqrt(2)
        for i, sign_pattern in enumerate(([1.0, -1.0], [1.0, 1.0])):
            v = pairs.vectors[:, i]
            target = np.array(sign_pattern) / np.sqrt(2)
            assert min(np.linalg.norm(v - target), np.linalg.norm(v + target)) < 1e-10
        assert np.allclose(np.abs(pairs.vectors), expected[:, None])

    def test_trace_identity_random_50(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((50, 50))
        w = 0.5 * (a + a.T)
        pairs = dense_eig_oracle(w)
        assert abs(np.trace(w) - pairs.values.sum()) < 1e-8

    def test_residuals_and_lapack_agreement(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((40, 40))
        w = 0.5 * (a + a.T)
        pairs = dense_eig_oracle(w)
        assert pairs.max_residual(lambda x: w @ x) < 1e-8 * np.abs(w).max() * 40
        # independent LAPACK cross-check
        assert np.allclose(pairs.values, np.linalg.eigvalsh(w), atol=1e-10)

    def test_vectors_unit_norm_and_sorted(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((20, 20))
        pairs = dense_eig_oracle(0.5 * (a + a.T))
        assert np.allclose(np.linalg.norm(pairs.vectors, axis=0), 1.0, atol=1e-8)
        assert np.all(np.diff(pairs.values) >= -1e-12)

    def test_asymmetric_rejected(self):
        with pytest.raises(EigenSolverError, match="symmetric"):
            dense_eig_oracle(np.array([[0.0, 1.0], [0.5, 0.0]]))

    def test_size_guard(self):
        with pytest.raises(EigenSolverError, match="guard"):
            dense_eig_oracle(np.zeros((2001, 2001)))

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((15, 15))
        w = 0.5 * (a + a.T)
        p1 = dense_eig_oracle(w)
        p2 = dense_eig_oracle(w)
        assert np.array_equal(p1.values, p2.values)
        assert np.array_equal(p1.vectors, p2.vectors)


class TestExtremalEig:
    def test_path3_known_spectrum(self, path3):
        summary = extremal_eig(path3, np.ones(2), k=1)
        assert summary.top.values[0] == pytest.approx(np.sqrt(2), abs=1e-10)
        assert summary.bottom.values[0] == pytest.approx(-np.sqrt(2), abs=1e-10)

    def test_wide_k_equals_dense_ends(self):
        g, w = _random_weighted_graph(4, per_block=6)
        dense = dense_eig_oracle(weighted_adjacency_dense(g, w))
        summary = extremal_eig(g, w, k=7)  # 2k >= n
        assert np.allclose(summary.bottom.values, dense.values[:7], atol=1e-10)
        assert np.allclose(summary.top.values, dense.values[-7:], atol=1e-10)

    def test_lanczos_matches_dense_oracle_at_200(self):
        g, _, _ = generate_sbm(9, 2, 100, 0.1, 0.01, 2, 0.0)
        w = np.random.default_rng(5).uniform(0.2, 1.0, g.num_edges)
        forced = extremal_eig(g, w, k=20, dense_threshold=0, seed=7)
        dense = dense_eig_oracle(weighted_adjacency_dense(g, w))
        assert np.allclose(forced.bottom.values, dense.values[:20], atol=1e-6)
        assert np.allclose(forced.top.values, dense.values[-20:], atol=1e-6)

    def test_residual_invariant(self):
        g, w = _random_weighted_graph(6)
        summary = extremal_eig(g, w, k=5, dense_threshold=0, seed=1)
        dense = weighted_adjacency_dense(g, w)
        scale = np.abs(dense).sum(axis=1).max()
        for pairs in (summary.top, summary.bottom):
            assert pairs.max_residual(lambda x: dense @ x) <= 1e-6 * scale

    def test_bad_k(self, path3):
        with pytest.raises(ValueError):
            extremal_eig(path3, np.ones(2), k=0)


class TestEigenVariationScores:
    def test_zero_anchor_weight_scores_zero(self):
        g = make_graph(4, [(0, 1), (1, 2), (2, 3)])
        w = np.array([0.0, 1.0, 1.0])
        summary = extremal_eig(g, w, k=2)
        scores = eigen_variation_scores(w, g, summary)
        assert scores[0] == 0.0
        assert (scores[1:] > 0).all()

    @pytest.mark.parametrize("k", [1, 2])
    def test_cycle_symmetry(self, k):
        g = make_graph(4, [(0, 1), (1, 2), (2, 3), (0, 3)])
        w = np.ones(4)
        summary = extremal_eig(g, w, k=k)
        scores = eigen_variation_scores(w, g, summary)
        assert np.allclose(scores, scores[0], rtol=1e-9)

    def test_first_order_prediction_small_h(self):
        """Scaling one edge by (1-h) shifts each eigenvalue by h*delta + O(h^2)."""
        g, w = _random_weighted_graph(7)
        dense = weighted_adjacency_dense(g, w)
        base = dense_eig_oracle(dense)
        norm = np.linalg.norm(dense, 2)
        rng = np.random.default_rng(8)
        h = 1e-3
        gaps = np.diff(base.values)
        for edge in rng.choice(g.num_edges, 3, replace=False):
            u, v = g.edges[edge]
            predicted = first_order_edge_deltas(g, w, base, edge)
            perturbed = dense.copy()
            perturbed[u, v] *= 1 - h
            perturbed[v, u] *= 1 - h
            exact = dense_eig_oracle(perturbed).values - base.values
            n = base.values.size
            for k in list(range(5)) + list(range(n - 5, n)):
                lo = gaps[k - 1] if k > 0 else np.inf
                hi = gaps[k] if k < n - 1 else np.inf
                if min(lo, hi) < 1e-6:
                    continue
                assert abs(exact[k] - h * predicted[k]) <= 5 * h**2 * norm

    def test_permutation_invariance(self):
        g, w = _random_weighted_graph(10, per_block=8)
        summary = extremal_eig(g, w, k=3)
        scores = eigen_variation_scores(w, g, summary)

        rng = np.random.default_rng(11)
        perm = rng.permutation(g.num_nodes)
        mapped_pairs = perm[g.edges]
        g2 = make_graph(g.num_nodes, mapped_pairs)
        w2 = np.zeros(g.num_edges)
        for eid, (u, v) in enumerate(mapped_pairs):
            w2[g2.edge_index_of(int(u), int(v))] = w[eid]
        summary2 = extremal_eig(g2, w2, k=3)
        scores2 = eigen_variation_scores(w2, g2, summary2)
        for eid, (u, v) in enumerate(mapped_pairs):
            assert scores2[g2.edge_index_of(int(u), int(v))] == pytest.approx(
                scores[eid], rel=1e-6
            )

    def test_node_count_mismatch_rejected(self, path3, triangle):
        summary = extremal_eig(triangle, np.ones(3), k=1)
        big = extremal_eig(make_graph(5, [(0, 1)]), np.ones(1), k=1)
        with pytest.raises(ValueError, match="does not match"):
            eigen_variation_scores(np.ones(2), path3, big)


class TestExactVariationOracle:
    def test_two_node_closed_form(self):
        g = make_graph(2, [(0, 1)])
        value = exact_variation_oracle(np.ones(1), g, 0, k=1)
        assert value == pytest.approx(2.0, abs=1e-10)

    def test_zero_weight_edge_is_noop(self):
        g = make_graph(3, [(0, 1), (1, 2)])
        w = np.array([0.0, 1.0])
        assert exact_variation_oracle(w, g, 0, k=1) == pytest.approx(0.0, abs=1e-10)

    def test_rank_agreement_with_first_order_scores(self):
        g, w = _random_weighted_graph(12)
        k = 20
        summary = extremal_eig(g, w, k=k)
        approx = eigen_variation_scores(w, g, summary)
        exact = np.array(
            [exact_variation_oracle(w, g, e, k=k) for e in range(g.num_edges)]
        )
        rho = spearmanr(approx, exact).statistic
        assert rho >= 0.9


class TestSpectralPreservation:
    def test_identical_graphs_zero(self):
        g, w = _random_weighted_graph(13, per_block=10)
        mask = np.ones(g.num_edges, dtype=bool)
        report = spectral_preservation(g, w, mask, w, mask)
        assert report.ratio == 0.0
        assert (report.relative_errors == 0.0).all()

    def test_k2_versus_empty_closed_form(self):
        g = make_graph(2, [(0, 1)])
        ones = np.ones(1)
        full = np.ones(1, dtype=bool)
        empty = np.zeros(1, dtype=bool)
        report = spectral_preservation(g, ones, full, ones, empty, k=2)
        # laplacian spectra: (2, 0) vs (0, 0); the zero eigenvalue clamps, and
        # solver noise on it is amplified by the clamped denominator (~1e-10)
        assert report.ratio == pytest.approx(1.0, abs=1e-6)
        assert report.clamped == 1

    def test_random_removal_strictly_positive(self):
        g, _, _ = generate_sbm(14, 2, 100, 0.1, 0.01, 2, 0.0)
        ones = np.ones(g.num_edges)
        full = np.ones(g.num_edges, dtype=bool)
        sparse = gst.random_sparsify(g, 0.2, seed=3)
        report = spectral_preservation(g, ones, full, ones, sparse)
        assert report.ratio > 0.0
        assert report.k == 200

    def test_adjacency_kind_and_nonnegative(self):
        g, w = _random_weighted_graph(15, per_block=8)
        full = np.ones(g.num_edges, dtype=bool)
        sparse = gst.random_sparsify(g, 0.3, seed=4)
        report = spectral_preservation(g, w, full, w, sparse, matrix_kind="adjacency")
        assert report.ratio >= 0.0
        assert (report.relative_errors >= 0.0).all()

    def test_bad_matrix_kind(self, path3):
        with pytest.raises(ValueError, match="matrix_kind"):
            spectral_preservation(
                path3, np.ones(2), np.ones(2, dtype=bool), np.ones(2),
                np.ones(2, dtype=bool), matrix_kind="hessian",
            )
