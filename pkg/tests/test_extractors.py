import numpy as np
import pytest

from satgraph.autodiff import Tensor
from satgraph.extractors import (
    GnnStack, extract, extract_subgraph, extract_subtree, gcn_layer, gin_layer, gnn_stack_from, init_gnn_stack,
    output_dim,
)
from satgraph.graph import build_graph, cycle_graph, disjoint_union, path_graph, permute_graph
from satgraph.verify import random_connected_graph, wl_color_multisets


def identity_mlp(d=1):
    return {"W1": Tensor(np.eye(d)), "b1": Tensor(np.zeros(d)), "W2": Tensor(np.eye(d)), "b2": Tensor(np.zeros(d))}


def identity_gin(k, d=1):
    return GnnStack("gin", [identity_mlp(d) for _ in range(k)])


def random_stack(rng, kind, k, d, edge_dim=0):
    arrays = init_gnn_stack(kind, k, d, edge_dim, rng)
    return gnn_stack_from({n: Tensor(a) for n, a in arrays.items()}, "", kind, k)


def two_triangles():
    return disjoint_union([cycle_graph(3), cycle_graph(3)])


class TestGcn:
    def test_isolated_node(self):
        g = build_graph(1, [], [[-2.0, 3.0]])
        w = np.array([[1.0, 2.0], [0.5, -1.0]])
        out = gcn_layer(g, Tensor(g.node_feats), Tensor(w), Tensor(np.array([0.1, 0.2])))
        np.testing.assert_allclose(out.data, np.maximum(g.node_feats @ w + [0.1, 0.2], 0))

    def test_zero_features(self):
        g = cycle_graph(4)
        out = gcn_layer(g, Tensor(np.zeros((4, 2))), Tensor(np.eye(2)), Tensor(np.zeros(2)))
        assert np.all(out.data == 0)

    def test_p2_hand_value(self):
        g = path_graph(2, np.array([[1.0], [3.0]]))
        out = gcn_layer(g, Tensor(g.node_feats), Tensor(np.eye(1)), Tensor(np.zeros(1)))
        assert out.data[:, 0].tolist() == [2.0, 2.0]

    def test_against_dense_formula(self, rng):
        g = random_connected_graph(rng, 7, 0.4, d=3)
        w, b = rng.standard_normal((3, 2)), rng.standard_normal(2)
        a = g.adjacency() + np.eye(7)
        dh = np.diag(1 / np.sqrt(a.sum(axis=1)))
        expected = np.maximum(dh @ a @ dh @ g.node_feats @ w + b, 0)
        out = gcn_layer(g, Tensor(g.node_feats), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, expected, atol=1e-13)


class TestGin:
    def test_single_edge_sum(self):
        g = path_graph(2, np.array([[1.0], [2.0]]))
        assert gin_layer(g, Tensor(g.node_feats), 0.0, identity_mlp()).data[:, 0].tolist() == [3.0, 3.0]

    def test_no_neighbours(self):
        g = build_graph(1, [], [[2.0]])
        assert gin_layer(g, Tensor(g.node_feats), 0.5, identity_mlp()).data.tolist() == [[3.0]]

    def test_triangle(self):
        g = cycle_graph(3)
        assert gin_layer(g, Tensor(g.node_feats), 0.0, identity_mlp()).data[:, 0].tolist() == [3.0] * 3

    def test_edge_messages(self):
        g = build_graph(2, [(0, 1)], [[1.0], [-5.0]], [[2.0]])
        out = gin_layer(g, Tensor(g.node_feats), 0.0, identity_mlp(), Tensor(np.array([[1.0]])))
        # node 0: 1 + relu(-5 + 2) = 1; node 1: -5 + relu(1 + 2) = -2, clipped by the MLP's ReLU
        assert out.data[:, 0].tolist() == [1.0, 0.0]

    def test_edge_features_need_embedding(self):
        g = build_graph(2, [(0, 1)], [[1.0], [2.0]], [[2.0]])
        with pytest.raises(ValueError):
            gin_layer(g, Tensor(g.node_feats), 0.0, identity_mlp())


class TestSubtree:
    def test_k0_is_identity(self, rng):
        x = Tensor(rng.standard_normal((5, 2)))
        assert extract_subtree(cycle_graph(5), x, None, 0) is x

    def test_regular_graph_rows_identical(self, rng):
        for kind in ("gin", "gcn"):
            for k in (1, 2, 3):
                out = extract_subtree(cycle_graph(6), Tensor(np.ones((6, 1))), random_stack(rng, kind, k, 1), k).data
                assert np.all(out == out[0])

    def test_cycle_vs_triangles_indistinguishable(self, rng):
        a, b = wl_color_multisets(cycle_graph(6), two_triangles())
        assert a == b
        for kind in ("gin", "gcn"):
            for k in (1, 2, 3):
                st = random_stack(rng, kind, k, 1)
                x = Tensor(np.ones((6, 1)))
                oa = extract_subtree(cycle_graph(6), x, st, k).data
                ob = extract_subtree(two_triangles(), x, st, k).data
                assert np.array_equal(np.sort(oa, axis=0), np.sort(ob, axis=0))

    def test_layer_count_must_match(self, rng):
        with pytest.raises(ValueError):
            extract_subtree(cycle_graph(4), Tensor(np.ones((4, 1))), random_stack(rng, "gin", 1, 1), 2)

    def test_locality(self, rng):
        g = path_graph(7, rng.standard_normal((7, 2)))
        st = random_stack(rng, "gin", 2, 2)
        base = extract_subtree(g, Tensor(g.node_feats), st, 2).data
        x = g.node_feats.copy()
        x[5:] = 100.0  # outside the 2-hop ball of node 2
        moved = extract_subtree(g, Tensor(x), st, 2).data
        assert np.array_equal(base[2], moved[2])


class TestSubgraph:
    def test_hand_values(self):
        st = identity_gin(1)
        x = Tensor(np.ones((6, 1)))
        tri = extract_subgraph(two_triangles(), x, st, 1).data
        hexa = extract_subgraph(cycle_graph(6), x, st, 1).data
        assert tri[:, 0].tolist() == [9.0] * 6
        assert hexa[:, 0].tolist() == [7.0] * 6
        assert tri[:, 1].tolist() == [1.0] * 6  # original feature concatenated

    def test_isolated_node(self):
        g = build_graph(1, [], [[2.0]])
        out = extract_subgraph(g, Tensor(g.node_feats), identity_gin(1), 1, concat_original=False)
        assert out.data.tolist() == [[2.0]]

    def test_runs_inside_subgraph_only(self):
        # with k=1 and two GIN layers the second hop must not leak in
        st = identity_gin(1)
        g = path_graph(4, np.array([[1.0], [10.0], [100.0], [1000.0]]))
        out = extract_subgraph(g, Tensor(g.node_feats), st, 1, concat_original=False).data[:, 0]
        # node 0: subgraph {0,1}, both map to 11 -> 22
        assert out[0] == 22.0
        # node 1: subgraph {0,1,2}: 11 + 111 + 110
        assert out[1] == 232.0

    def test_needs_k(self):
        with pytest.raises(ValueError):
            extract_subgraph(cycle_graph(4), Tensor(np.ones((4, 1))), None, 0)

    def test_output_dim(self):
        assert output_dim(8, "subgraph", 2, True) == 16
        assert output_dim(8, "subgraph", 2, False) == 8
        assert output_dim(8, "subtree", 2, True) == 8


class TestEquivariance:
    @pytest.mark.parametrize("strategy", ["subtree", "subgraph"])
    def test_integer_data_exact(self, rng, strategy):
        g = random_connected_graph(rng, 8, 0.4, d=2, edge_dim=2)
        g = build_graph(8, g.edges, rng.integers(-3, 4, (8, 2)).astype(float),
                        rng.integers(-3, 4, (g.num_edges, 2)).astype(float))
        st = random_stack(rng, "gin", 2, 2, edge_dim=2)
        # integer-valued weights keep every partial sum exact
        for layer in st.layers:
            for t in layer.values():
                t.data[...] = np.round(t.data * 4)
        pi = rng.permutation(8)
        a = extract(g, Tensor(g.node_feats), st, strategy, 2).data
        gp = permute_graph(g, pi)
        b = extract(gp, Tensor(gp.node_feats), st, strategy, 2).data
        assert np.array_equal(b[pi], a)

    @pytest.mark.parametrize("strategy", ["subtree", "subgraph"])
    @pytest.mark.parametrize("kind", ["gin", "gcn"])
    def test_float_features(self, rng, strategy, kind):
        g = random_connected_graph(rng, 8, 0.4, d=3)
        st = random_stack(rng, kind, 2, 3)
        pi = rng.permutation(8)
        a = extract(g, Tensor(g.node_feats), st, strategy, 2).data
        gp = permute_graph(g, pi)
        b = extract(gp, Tensor(gp.node_feats), st, strategy, 2).data
        np.testing.assert_allclose(b[pi], a, atol=1e-12)
