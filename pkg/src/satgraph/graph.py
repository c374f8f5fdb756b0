"""Undirected simple graphs with dense node features.

A :class:`Graph` is immutable after :func:`build_graph` returns it.  Edges are
stored canonically (``u < v``, lexicographically sorted) so that two graphs
with the same edge set compare equal regardless of input order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels


class GraphError(ValueError):
    """Base class for graph construction errors."""


class NodeIndexError(GraphError):
    pass


class SelfLoopError(GraphError):
    pass


class DuplicateEdgeError(GraphError):
    pass


class DimensionError(GraphError):
    pass


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    num_nodes: int
    edges: np.ndarray  # (E, 2) int64, u < v, sorted
    node_feats: np.ndarray  # (n, d) float64
    edge_feats: np.ndarray | None  # (E, d_e) float64
    degrees: np.ndarray  # (n,) int64
    indptr: np.ndarray  # CSR adjacency, neighbours ascending
    indices: np.ndarray
    # directed message arrays (both orientations), ordered by (dst, src)
    src: np.ndarray
    dst: np.ndarray
    edge_of: np.ndarray  # undirected edge id per directed message
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def feat_dim(self) -> int:
        return self.node_feats.shape[1]

    @property
    def edge_dim(self) -> int:
        return 0 if self.edge_feats is None else self.edge_feats.shape[1]

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        if self.num_edges:
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
            a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def with_node_feats(self, node_feats) -> "Graph":
        return build_graph(self.num_nodes, self.edges, node_feats, self.edge_feats)

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        if self.num_nodes != other.num_nodes or not np.array_equal(self.edges, other.edges):
            return False
        if self.node_feats.shape != other.node_feats.shape or not np.array_equal(self.node_feats, other.node_feats):
            return False
        if (self.edge_feats is None) != (other.edge_feats is None):
            return False
        return self.edge_feats is None or np.array_equal(self.edge_feats, other.edge_feats)

    __hash__ = None

    def __repr__(self):
        return f"Graph(num_nodes={self.num_nodes}, num_edges={self.num_edges}, feat_dim={self.feat_dim}, edge_dim={self.edge_dim})"


def build_graph(num_nodes, edges, node_feats, edge_feats=None) -> Graph:
    """Validate and normalize a graph.

    Edges are canonicalized to ``u < v`` and sorted; ``edge_feats`` rows follow
    their edges.  Raises a distinct :class:`GraphError` subclass for bad
    indices, self-loops, duplicate edges and dimension mismatches.
    """
    n = int(num_nodes)
    if n < 0:
        raise DimensionError("num_nodes must be non-negative")
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    x = np.asarray(node_feats, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(n, -1) if n else x.reshape(0, 0)
    if x.ndim != 2 or x.shape[0] != n:
        raise DimensionError(f"node_feats has {x.shape[0] if x.ndim else 0} rows, expected {n}")
    ef = None
    if edge_feats is not None:
        ef = np.asarray(edge_feats, dtype=np.float64)
        if ef.ndim == 1:
            ef = ef.reshape(len(e), -1)
        if ef.ndim != 2 or ef.shape[0] != len(e):
            raise DimensionError(f"edge_feats has {ef.shape[0]} rows, expected {len(e)} (one per edge)")

    if len(e) and (e.min() < 0 or e.max() >= n):
        bad = e[(e < 0).any(axis=1) | (e >= n).any(axis=1)][0]
        raise NodeIndexError(f"edge {tuple(bad)} out of range for {n} nodes")
    if len(e) and (e[:, 0] == e[:, 1]).any():
        bad = e[e[:, 0] == e[:, 1]][0]
        raise SelfLoopError(f"self-loop at node {bad[0]}")
    canon = np.sort(e, axis=1)
    order = np.lexsort((canon[:, 1], canon[:, 0]))
    canon = canon[order]
    if len(canon) > 1:
        dup = (np.diff(canon, axis=0) == 0).all(axis=1)
        if dup.any():
            raise DuplicateEdgeError(f"duplicate edge {tuple(canon[np.argmax(dup)])}")
    if ef is not None:
        ef = ef[order]

    m = len(canon)
    src = np.concatenate([canon[:, 0], canon[:, 1]])
    dst = np.concatenate([canon[:, 1], canon[:, 0]])
    eid = np.concatenate([np.arange(m), np.arange(m)]).astype(np.int64)
    by_dst = np.lexsort((src, dst))
    src, dst, eid = src[by_dst], dst[by_dst], eid[by_dst]
    degrees = np.bincount(dst, minlength=n).astype(np.int64)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(degrees, out=indptr[1:])

    return Graph(
        num_nodes=n,
        edges=_frozen(canon),
        node_feats=_frozen(x),
        edge_feats=None if ef is None else _frozen(ef),
        degrees=_frozen(degrees),
        indptr=_frozen(indptr),
        indices=_frozen(src.copy()),
        src=_frozen(src),
        dst=_frozen(dst),
        edge_of=_frozen(eid),
    )


def _check_node(g: Graph, u: int):
    if not 0 <= u < g.num_nodes:
        raise NodeIndexError(f"node {u} out of range for {g.num_nodes} nodes")


def k_hop_neighborhood(g: Graph, u: int, k: int) -> np.ndarray:
    """Sorted ids of all nodes within ``k`` hops of ``u``, ``u`` included."""
    _check_node(g, u)
    if k < 0:
        raise ValueError("k must be >= 0")
    return _kernels.khop_ball(g.indptr, g.indices, int(u), int(k), g.num_nodes)


@dataclass(frozen=True, eq=False)
class InducedSubgraph:
    graph: Graph
    root_local: int
    mapping: np.ndarray  # local -> global


def induced_subgraph(g: Graph, nodes, root: int) -> InducedSubgraph:
    nodes = np.asarray(nodes, dtype=np.int64)
    if len(nodes) and (np.diff(nodes) <= 0).any():
        raise ValueError("node set must be strictly increasing")
    hit = np.flatnonzero(nodes == root)
    if len(hit) == 0:
        raise ValueError(f"root {root} not in node set")
    local = np.full(g.num_nodes, -1, dtype=np.int64)
    local[nodes] = np.arange(len(nodes))
    keep = (local[g.edges[:, 0]] >= 0) & (local[g.edges[:, 1]] >= 0) if g.num_edges else np.zeros(0, dtype=bool)
    sub_edges = local[g.edges[keep]] if g.num_edges else np.zeros((0, 2), dtype=np.int64)
    ef = None if g.edge_feats is None else g.edge_feats[keep]
    sub = build_graph(len(nodes), sub_edges, g.node_feats[nodes], ef)
    return InducedSubgraph(sub, int(hit[0]), _frozen(nodes.copy()))


def permute_graph(g: Graph, pi) -> Graph:
    """Relabel node ``u`` as ``pi[u]``; node ``v`` of the result carries the data of ``pi^-1(v)``."""
    pi = np.asarray(pi, dtype=np.int64)
    if pi.shape != (g.num_nodes,) or not np.array_equal(np.sort(pi), np.arange(g.num_nodes)):
        raise ValueError("pi is not a permutation of the node indices")
    inv = np.empty_like(pi)
    inv[pi] = np.arange(len(pi))
    edges = pi[g.edges] if g.num_edges else g.edges
    return build_graph(g.num_nodes, edges, g.node_feats[inv], g.edge_feats)


def disjoint_union(graphs) -> Graph:
    graphs = list(graphs)
    offset = 0
    edges, feats, efeats = [], [], []
    with_edge = [gr.edge_feats is not None for gr in graphs]
    if any(with_edge) and not all(with_edge):
        raise DimensionError("cannot mix graphs with and without edge features")
    for gr in graphs:
        edges.append(gr.edges + offset)
        feats.append(gr.node_feats)
        if gr.edge_feats is not None:
            efeats.append(gr.edge_feats)
        offset += gr.num_nodes
    e = np.concatenate(edges) if edges else np.zeros((0, 2), dtype=np.int64)
    x = np.concatenate(feats) if feats else np.zeros((0, 0))
    return build_graph(offset, e, x, np.concatenate(efeats) if efeats else None)


def cycle_graph(n: int, feats=None) -> Graph:
    edges = [(i, (i + 1) % n) for i in range(n)]
    return build_graph(n, edges, np.ones((n, 1)) if feats is None else feats)


def path_graph(n: int, feats=None) -> Graph:
    return build_graph(n, [(i, i + 1) for i in range(n - 1)], np.ones((n, 1)) if feats is None else feats)
