import numpy as np
import pytest
from fractions import Fraction

from satgraph.graph import build_graph, cycle_graph, disjoint_union, path_graph, permute_graph
from satgraph.posenc import (
    EigenError, PosEncoding, attach_encoding, encoding_for, lap_pe, normalized_laplacian, rwpe, sym_eig,
)
from satgraph.verify import lap_pe_unambiguous, random_connected_graph

from oracles import rwpe_matrix_power


def c3_return_probabilities(p):
    """Exact return probabilities on a triangle from the recurrence
    r_{t+1} = (1 - r_t) / 2 (a walker away from home returns w.p. 1/2)."""
    r, out = Fraction(1), []
    for _ in range(p):
        r = (1 - r) / 2
        out.append(float(r))
    return out


class TestRwpe:
    def test_single_edge(self):
        assert rwpe(path_graph(2), 2).values.tolist() == [[0.0, 1.0], [0.0, 1.0]]

    def test_triangle(self):
        assert rwpe(cycle_graph(3), 3).values.tolist() == [[0.0, 0.5, 0.25]] * 3
        assert rwpe(cycle_graph(3), 3).values[0].tolist() == c3_return_probabilities(3)

    def test_isolated_node(self):
        g = build_graph(3, [(0, 1)], np.ones((3, 1)))
        assert rwpe(g, 5).values[2].tolist() == [0.0] * 5

    def test_matches_matrix_powers(self, rng):
        for _ in range(10):
            g = random_connected_graph(rng, 8, 0.4)
            np.testing.assert_allclose(rwpe(g, 6).values, rwpe_matrix_power(g.adjacency(), 6), atol=1e-14)

    def test_range_and_first_step(self, rng):
        g = random_connected_graph(rng, 9, 0.5)
        v = rwpe(g, 8).values
        assert np.all(v[:, 0] == 0.0)
        assert np.all((v >= 0) & (v <= 1))

    def test_permutation_equivariance(self, rng):
        g = random_connected_graph(rng, 8, 0.4)
        pi = rng.permutation(8)
        a, b = rwpe(g, 5).values, rwpe(permute_graph(g, pi), 5).values
        assert np.array_equal(b[pi], a)

    def test_bad_steps(self):
        with pytest.raises(ValueError):
            rwpe(cycle_graph(3), 0)


class TestSymEig:
    def test_identity(self):
        w, v = sym_eig(np.eye(3))
        assert w.tolist() == [1.0, 1.0, 1.0]

    def test_diagonal(self):
        w, v = sym_eig(np.diag([3.0, 1.0, 2.0]))
        assert w.tolist() == [1.0, 2.0, 3.0]
        assert np.array_equal(np.abs(v), np.eye(3)[:, [1, 2, 0]])

    def test_c4_laplacian(self):
        w, _ = sym_eig(normalized_laplacian(cycle_graph(4)))
        expected = sorted(1 - np.cos(2 * np.pi * k / 4) for k in range(4))
        np.testing.assert_allclose(w, expected, atol=1e-8)
        np.testing.assert_allclose(w, [0, 1, 1, 2], atol=1e-8)

    def test_against_numpy(self, rng):
        a = rng.standard_normal((7, 7))
        a = a + a.T
        w, v = sym_eig(a)
        np.testing.assert_allclose(w, np.linalg.eigvalsh(a), atol=1e-10)
        np.testing.assert_allclose(v.T @ v, np.eye(7), atol=1e-10)

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            sym_eig(np.array([[0.0, 1.0], [0.0, 0.0]]))

    def test_sweep_cap(self, rng):
        a = rng.standard_normal((9, 9))
        with pytest.raises(EigenError):
            sym_eig(a + a.T, max_sweeps=1)


class TestLapPe:
    def test_c4_selected_eigenvalues(self):
        g = cycle_graph(4)
        pe = lap_pe(g, 2).values
        lap = normalized_laplacian(g)
        for j in range(2):
            lam = pe[:, j] @ lap @ pe[:, j]
            assert lam == pytest.approx(1.0, abs=1e-8)

    def test_skipped_eigenvalue_is_zero(self, rng):
        g = random_connected_graph(rng, 7, 0.4)
        w, _ = sym_eig(normalized_laplacian(g))
        assert abs(w[0]) < 1e-10

    def test_orthogonal_columns_and_residuals(self, rng):
        g = random_connected_graph(rng, 8, 0.4)
        pe = lap_pe(g, 4).values
        np.testing.assert_allclose(pe.T @ pe, np.eye(4), atol=1e-8)
        lap = normalized_laplacian(g)
        for j in range(4):
            lam = pe[:, j] @ lap @ pe[:, j]
            assert np.linalg.norm(lap @ pe[:, j] - lam * pe[:, j]) < 1e-8

    def test_sign_rule(self, rng):
        pe = lap_pe(random_connected_graph(rng, 8, 0.4), 3).values
        for j in range(3):
            assert pe[np.argmax(np.abs(pe[:, j])), j] > 0

    def test_equivariant_when_unambiguous(self, rng):
        checked = 0
        while checked < 5:
            g = random_connected_graph(rng, 7, 0.5)
            if not lap_pe_unambiguous(g, 3):
                continue
            pi = rng.permutation(7)
            a, b = lap_pe(g, 3).values, lap_pe(permute_graph(g, pi), 3).values
            np.testing.assert_allclose(b[pi], a, atol=1e-9)
            checked += 1

    def test_too_many_columns(self):
        with pytest.raises(ValueError):
            lap_pe(cycle_graph(4), 4)

    def test_isolated_node(self):
        g = build_graph(3, [(0, 1)], np.ones((3, 1)))
        lap = normalized_laplacian(g)
        assert lap[2].tolist() == [0.0, 0.0, 1.0]
        assert lap_pe(g, 2).values.shape == (3, 2)


class TestAttach:
    def test_none_is_unchanged(self):
        g = cycle_graph(4)
        assert attach_encoding(g, encoding_for(g, "none", 3)) is g

    def test_rwpe_width(self, rng):
        g = random_connected_graph(rng, 25, 0.2, d=3)
        assert attach_encoding(g, rwpe(g, 20)).node_feats.shape == (25, 23)

    def test_row_mismatch(self):
        with pytest.raises(ValueError):
            attach_encoding(cycle_graph(4), PosEncoding("rwpe", np.zeros((3, 2))))

    def test_cycle_vs_triangles_rwpe_differs(self):
        # both graphs are 2-regular, but the return probability after 3 steps
        # is 1/4 on a triangle and 0 on a hexagon
        c6 = attach_encoding(cycle_graph(6), rwpe(cycle_graph(6), 4)).node_feats
        t = disjoint_union([cycle_graph(3), cycle_graph(3)])
        tt = attach_encoding(t, rwpe(t, 4)).node_feats
        oracle_c6 = rwpe_matrix_power(cycle_graph(6).adjacency(), 4)
        oracle_t = rwpe_matrix_power(t.adjacency(), 4)
        assert not np.array_equal(oracle_c6, oracle_t)
        assert not np.array_equal(c6, tt)
        assert c6[0, 1:].tolist() == [0.0, 0.5, 0.0, 0.375]
        assert tt[0, 1:].tolist() == [0.0, 0.5, 0.25, 0.375]
