import numpy as np
import pytest

import hostcast.numerics as nm
from hostcast.errors import InputError, ShapeError
from hostcast.graph import (
    HostGraph,
    build_host_graph,
    graph_conv,
    lambda_max,
    load_edge_csv,
    spectral_conv_oracle,
    with_order,
)
from hostcast.numerics import Matrix


def random_graph(rng, n, K, edge_prob=0.4):
    adj = (rng.random((n, n)) < edge_prob).astype(float)
    adj = np.triu(adj, 1)
    adj = adj + adj.T
    edges = [(f"h{i}", f"h{j}") for i in range(n) for j in range(i + 1, n) if adj[i, j]]
    return build_host_graph(edges, [f"h{i}" for i in range(n)], K)


class TestBuild:
    def test_two_node_path_by_hand(self):
        g = build_host_graph([("a", "b")], ["a", "b"], K=2)
        np.testing.assert_array_equal(g.adjacency.data, [[0, 1], [1, 0]])
        np.testing.assert_allclose(g.laplacian.data, [[1, -1], [-1, 1]], atol=1e-12)
        assert g.lambda_max == pytest.approx(2.0, abs=1e-9)
        np.testing.assert_allclose(g.scaled_laplacian.data, [[0, -1], [-1, 0]], atol=1e-9)

    def test_single_isolated_node(self):
        g = build_host_graph([], ["only"], K=1)
        np.testing.assert_array_equal(g.laplacian.data, [[1.0]])
        np.testing.assert_array_equal(g.cheb_basis[0].data, [[1.0]])

    def test_basis_starts_with_identity_and_scaled_laplacian(self):
        g = random_graph(np.random.default_rng(0), 7, K=4)
        np.testing.assert_array_equal(g.cheb_basis[0].data, np.eye(7))
        np.testing.assert_array_equal(g.cheb_basis[1].data, g.scaled_laplacian.data)

    def test_chebyshev_recursion_order_two(self):
        g = random_graph(np.random.default_rng(1), 6, K=3)
        lt = g.scaled_laplacian.data
        np.testing.assert_allclose(g.cheb_basis[2].data, 2.0 * lt @ lt - np.eye(6), atol=1e-12)

    def test_self_loops_ignored(self):
        g = build_host_graph([("a", "a"), ("a", "b")], ["a", "b"], K=2)
        assert g.adjacency.data[0, 0] == 0.0
        assert g.adjacency.data[0, 1] == 1.0

    def test_duplicate_node_ids_fatal(self):
        with pytest.raises(InputError, match="duplicate"):
            build_host_graph([], ["a", "a"], K=1)

    def test_unknown_host_named_in_error(self):
        with pytest.raises(InputError, match="mystery"):
            build_host_graph([("a", "mystery")], ["a", "b"], K=1)

    def test_laplacian_eigenvalues_in_range(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            g = random_graph(rng, 8, K=2)
            eig = np.linalg.eigvalsh(g.laplacian.data)
            assert eig[0] > -1e-9 and eig[-1] < 2.0 + 1e-9
            eig_s = np.linalg.eigvalsh(g.scaled_laplacian.data)
            assert eig_s[0] > -1.0 - 1e-9 and eig_s[-1] < 1.0 + 1e-9

    def test_with_order_extends_basis(self):
        g = random_graph(np.random.default_rng(2), 5, K=2)
        g4 = with_order(g, 4)
        assert g4.order == 4
        np.testing.assert_array_equal(g4.cheb_basis[1].data, g.cheb_basis[1].data)
        lt = g.scaled_laplacian.data
        t2 = 2 * lt @ lt - np.eye(5)
        np.testing.assert_allclose(g4.cheb_basis[3].data, 2 * lt @ t2 - lt, atol=1e-12)


class TestLambdaMax:
    def test_path_graph(self):
        lap = Matrix(np.array([[1.0, -1.0], [-1.0, 1.0]]))
        assert lambda_max(lap) == pytest.approx(2.0, abs=1e-9)

    def test_identity(self):
        assert lambda_max(nm.eye(4)) == pytest.approx(1.0, abs=1e-12)

    def test_power_iteration_matches_dense_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            a = rng.standard_normal((8, 8))
            sym = (a + a.T) / 2.0 + 4.0 * np.eye(8)  # keep it PSD-ish like a shifted Laplacian
            want = float(np.linalg.eigvalsh(sym)[-1])
            got = lambda_max(Matrix(sym), dense_cutoff=0)
            assert got == pytest.approx(want, abs=1e-8)

    def test_asymmetric_fatal(self):
        with pytest.raises(InputError, match="symmetric"):
            lambda_max(Matrix(np.array([[1.0, 2.0], [0.0, 1.0]])))


class TestGraphConv:
    def test_order_one_identity_theta(self):
        rng = np.random.default_rng(3)
        g = random_graph(rng, 5, K=1)
        x = Matrix(rng.standard_normal((5, 3)))
        y = graph_conv(g.cheb_basis, x, [nm.eye(3)])
        np.testing.assert_allclose(y.data, x.data, atol=1e-12)

    def test_edgeless_graph_is_shared_per_node_map(self):
        # with no edges L = I, lambda_max = 1, scaled L = I, so every T_k = I
        # and the convolution collapses to one linear map applied at each node
        rng = np.random.default_rng(4)
        g = build_host_graph([], [f"h{i}" for i in range(4)], K=3)
        np.testing.assert_array_equal(g.scaled_laplacian.data, np.eye(4))
        x = Matrix(rng.standard_normal((4, 2)))
        theta = [Matrix(rng.standard_normal((2, 2))) for _ in range(3)]
        y = graph_conv(g.cheb_basis, x, theta)
        combined = theta[0].data + theta[1].data + theta[2].data
        np.testing.assert_allclose(y.data, x.data @ combined, atol=1e-12)

    def test_matches_spectral_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            n = int(rng.integers(2, 13))
            K = int(rng.integers(1, 6))
            g = random_graph(rng, n, K)
            x = Matrix(rng.standard_normal((n, 3)))
            coeffs = rng.standard_normal(K)
            theta = [nm.scale(nm.eye(3), c) for c in coeffs]
            y = graph_conv(g.cheb_basis, x, theta)
            want = spectral_conv_oracle(g.laplacian, x, list(coeffs))
            assert np.max(np.abs(y.data - want.data)) < 1e-8

    def test_theta_count_mismatch_fatal(self):
        g = random_graph(np.random.default_rng(7), 4, K=2)
        with pytest.raises(ShapeError):
            graph_conv(g.cheb_basis, nm.zeros(4, 2), [nm.eye(2)])

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            n, K = 8, 3
            g = random_graph(rng, n, K)
            perm = rng.permutation(n)
            p = np.eye(n)[perm]
            from hostcast.graph import graph_from_adjacency

            gp = graph_from_adjacency(
                tuple(f"p{i}" for i in range(n)), p @ g.adjacency.data @ p.T, K
            )
            x = Matrix(rng.standard_normal((n, 2)))
            theta = [Matrix(rng.standard_normal((2, 2))) for _ in range(K)]
            y = graph_conv(g.cheb_basis, x, theta)
            yp = graph_conv(gp.cheb_basis, Matrix(p @ x.data), theta)
            assert np.max(np.abs(yp.data - p @ y.data)) < 1e-10

    def test_chebyshev_terms_bounded(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            g = random_graph(rng, 9, K=5)
            for t_k in g.cheb_basis:
                radius = np.max(np.abs(np.linalg.eigvalsh(t_k.data)))
                assert radius <= 1.0 + 1e-9

    def test_locality_is_exact(self):
        # ring of 8: distance between node 0 and node 4 is 4 > K-1 = 2
        n, K = 8, 3
        edges = [(f"h{i}", f"h{(i + 1) % n}") for i in range(n)]
        g = build_host_graph(edges, [f"h{i}" for i in range(n)], K)
        rng = np.random.default_rng(11)
        x = rng.standard_normal((n, 2))
        theta = [Matrix(rng.standard_normal((2, 2))) for _ in range(K)]
        y0 = graph_conv(g.cheb_basis, Matrix(x.copy()), theta).data
        x2 = x.copy()
        x2[4] += 100.0
        y1 = graph_conv(g.cheb_basis, Matrix(x2), theta).data
        assert np.array_equal(y0[0], y1[0])  # 4 hops away: untouched
        assert not np.array_equal(y0[3], y1[3])  # 1 hop away: affected


class TestSpectralOracle:
    def test_identity_filter(self):
        rng = np.random.default_rng(12)
        g = random_graph(rng, 6, K=1)
        x = Matrix(rng.standard_normal((6, 2)))
        y = spectral_conv_oracle(g.laplacian, x, [1.0])
        np.testing.assert_allclose(y.data, x.data, atol=1e-10)

    def test_t1_filter_is_scaled_laplacian(self):
        rng = np.random.default_rng(13)
        g = random_graph(rng, 6, K=2)
        x = Matrix(rng.standard_normal((6, 2)))
        y = spectral_conv_oracle(g.laplacian, x, [0.0, 1.0])
        np.testing.assert_allclose(y.data, g.scaled_laplacian.data @ x.data, atol=1e-9)

    def test_size_cap(self):
        with pytest.raises(InputError, match="64"):
            spectral_conv_oracle(nm.eye(65), nm.zeros(65, 1), [1.0])


class TestEdgeCsv:
    def test_load_and_dedup(self, tmp_path):
        p = tmp_path / "edges.csv"
        p.write_text("src,dst\na,b\nb,a\nb,c\na,b\n")
        assert load_edge_csv(p) == [("a", "b"), ("b", "c")]

    def test_bad_header(self, tmp_path):
        p = tmp_path / "edges.csv"
        p.write_text("from,to\na,b\n")
        with pytest.raises(InputError, match="header"):
            load_edge_csv(p)

    def test_malformed_row_has_line_number(self, tmp_path):
        p = tmp_path / "edges.csv"
        p.write_text("src,dst\na,b\nc\n")
        with pytest.raises(InputError, match="line 3"):
            load_edge_csv(p)
