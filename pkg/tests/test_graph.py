import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from mshcnet import tensor as T
from mshcnet.errors import ConfigurationError, DataError, DimensionError
from mshcnet.graph import GraphConfig, build_knn_graph, graph_from_edges, knn_indices, spmv, sym_normalized_laplacian
from mshcnet.tensor import Tensor


def brute_knn(x, k):
    """All-pairs distances, stable sort so ties go to the lower index."""
    d = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def edge_set(g):
    a = sp.triu(g.adjacency).tocoo()
    return {(int(i), int(j)) for i, j in zip(a.row, a.col)}


class TestKnn:
    def test_three_points_on_a_line(self):
        g = build_knn_graph(np.array([[0.0], [1.0], [3.0]]), GraphConfig(k=1))
        np.testing.assert_array_equal(knn_indices(np.array([[0.0], [1.0], [3.0]]), 1)[:, 0], [1, 0, 1])
        assert edge_set(g) == {(0, 1), (1, 2)}

    def test_identical_points_tie_to_lower_index(self):
        x = np.array([[0.0], [0.0], [5.0]])
        nbr = knn_indices(x, 1)
        assert nbr[0, 0] == 1 and nbr[1, 0] == 0 and nbr[2, 0] == 0
        g = build_knn_graph(x, GraphConfig(k=1))
        assert edge_set(g) == {(0, 1), (0, 2)}

    def test_many_ties_beyond_candidate_margin(self):
        x = np.zeros((40, 2))
        np.testing.assert_array_equal(knn_indices(x, 3, margin=2)[39], [0, 1, 2])

    def test_neighbours_closer_than_non_neighbours(self, rng):
        x = rng.normal(size=(50, 8))
        nbr = knn_indices(x, 5)
        d = np.linalg.norm(x[:, None] - x[None], axis=2)
        for i in range(50):
            others = np.setdiff1d(np.delete(np.arange(50), i), nbr[i])
            assert d[i, nbr[i]].max() <= d[i, others].min()

    @settings(max_examples=25, deadline=None)
    @given(st.integers(8, 60), st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_matches_brute_force(self, n, k, seed):
        x = np.random.default_rng(seed).integers(0, 4, size=(n, 2)).astype(float)  # lots of ties
        np.testing.assert_array_equal(knn_indices(x, k, chunk=7, margin=1), brute_knn(x, k))

    def test_chunking_does_not_change_result(self, rng):
        x = rng.normal(size=(90, 4))
        np.testing.assert_array_equal(knn_indices(x, 4, chunk=13), knn_indices(x, 4))


class TestGraphStructure:
    @settings(max_examples=20, deadline=None)
    @given(st.integers(12, 120), st.integers(1, 8), st.integers(0, 2**31 - 1))
    def test_invariants(self, n, k, seed):
        g = build_knn_graph(np.random.default_rng(seed).normal(size=(n, 3)), GraphConfig(k=k))
        a = g.adjacency
        assert a.diagonal().sum() == 0
        assert abs(a - a.T).max() == 0
        assert g.degrees.min() >= k
        np.testing.assert_array_equal(g.degrees, [len(nb) for nb in g.neighbor_lists])

    def test_k_not_below_n(self):
        with pytest.raises(ConfigurationError):
            build_knn_graph(np.zeros((5, 2)), GraphConfig(k=5))

    def test_nan_feature_named(self):
        x = np.zeros((6, 2))
        x[4, 1] = np.nan
        with pytest.raises(DataError, match="pixel 4"):
            build_knn_graph(x, GraphConfig(k=2))

    def test_spectral_spatial_needs_coords(self):
        with pytest.raises(ConfigurationError):
            build_knn_graph(np.zeros((6, 2)), GraphConfig(k=2, feature_space="spectral_spatial"))

    def test_spectral_spatial_uses_coords(self):
        x = np.zeros((4, 1))
        coords = np.array([[0, 0], [0, 1], [5, 5], [5, 6]])
        g = build_knn_graph(x, GraphConfig(k=1, feature_space="spectral_spatial"), coords=coords)
        assert edge_set(g) == {(0, 1), (2, 3)}

    def test_closed_neighbourhoods(self):
        g = graph_from_edges(4, [(0, 1), (1, 2), (1, 3)])
        idx = g.closed_neighborhoods()
        assert sorted(set(idx[1])) == [0, 1, 2, 3]
        assert sorted(set(idx[0])) == [0, 1]


class TestLaplacian:
    def test_two_nodes(self):
        lap = sym_normalized_laplacian(sp.csr_matrix([[0.0, 1.0], [1.0, 0.0]]))
        np.testing.assert_allclose(lap.toarray(), [[1, -1], [-1, 1]])

    def test_three_node_path(self):
        r = 1 / np.sqrt(2)
        lap = graph_from_edges(3, [(0, 1), (1, 2)]).laplacian_sym.toarray()
        np.testing.assert_allclose(lap, [[1, -r, 0], [-r, 1, -r], [0, -r, 1]], atol=1e-15)

    def test_isolated_node_rejected(self):
        with pytest.raises(DataError, match="isolated node 2"):
            sym_normalized_laplacian(sp.csr_matrix(np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]], dtype=float)))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(10, 200), st.integers(0, 2**31 - 1))
    def test_symmetric_unit_diagonal_bounded_spectrum(self, n, seed):
        rng = np.random.default_rng(seed)
        g = build_knn_graph(rng.normal(size=(n, 4)), GraphConfig(k=min(5, n - 1)))
        lap = g.laplacian_sym
        assert abs(lap - lap.T).max() <= 1e-12
        np.testing.assert_array_equal(lap.diagonal(), 1.0)
        x = rng.normal(size=(n, 5))
        q = np.einsum("ij,ij->j", x, lap @ x) / np.einsum("ij,ij->j", x, x)
        assert q.min() >= -1e-9 and q.max() <= 2 + 1e-9


class TestSpmv:
    def test_identity(self, rng):
        x = rng.normal(size=(6, 3))
        np.testing.assert_array_equal(spmv(sp.identity(6, format="csr"), x).data, x)

    def test_four_cycle_kills_constant(self):
        g = graph_from_edges(4, [(0, 1), (1, 2), (2, 3), (3, 0)])
        np.testing.assert_allclose(spmv(g.laplacian_sym, np.ones((4, 1))).data, 0.0, atol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 64), st.integers(0, 2**31 - 1))
    def test_dense_oracle(self, n, seed):
        rng = np.random.default_rng(seed)
        m = sp.random(n, n, density=0.2, random_state=rng, format="csr")
        x = rng.normal(size=(n, 3))
        np.testing.assert_allclose(spmv(m, x).data, m.toarray() @ x, atol=1e-12, rtol=0)

    def test_gradient_is_transpose_product(self, rng):
        m = sp.random(5, 4, density=0.5, random_state=rng, format="csr")
        x = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        T.backward(T.reduce_sum(spmv(m, x)))
        np.testing.assert_allclose(x.grad, m.toarray().T @ np.ones((5, 2)), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            spmv(sp.identity(3, format="csr"), np.ones((4, 2)))
