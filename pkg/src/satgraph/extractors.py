"""Structure extractors: GCN/GIN message passing and the k-subtree and
k-subgraph strategies that turn node features into per-node structure
representations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Graph, disjoint_union, induced_subgraph, k_hop_neighborhood


@dataclass
class GnnStack:
    kind: str  # "gin" | "gcn"
    layers: list = field(default_factory=list)  # one dict of Tensors per layer
    eps: float = 0.0  # GIN self weight is (1 + eps)

    def __len__(self):
        return len(self.layers)


def uniform_weight(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_gnn_stack(kind, num_layers, dim, edge_dim, rng, prefix=""):
    """Initial arrays for a stack of ``num_layers`` dim->dim GNN layers."""
    out = {}
    for i in range(num_layers):
        p = f"{prefix}{i}."
        if kind == "gcn":
            out[p + "W"] = uniform_weight(rng, dim, (dim, dim))
            out[p + "b"] = np.zeros(dim)
        elif kind == "gin":
            out[p + "W1"] = uniform_weight(rng, dim, (dim, dim))
            out[p + "b1"] = np.zeros(dim)
            out[p + "W2"] = uniform_weight(rng, dim, (dim, dim))
            out[p + "b2"] = np.zeros(dim)
            if edge_dim:
                out[p + "We"] = uniform_weight(rng, edge_dim, (edge_dim, dim))
        else:
            raise ValueError(f"unknown GNN kind {kind!r}")
    return out


def gnn_stack_from(params, prefix, kind, num_layers, eps=0.0) -> GnnStack:
    layers = []
    for i in range(num_layers):
        p = f"{prefix}{i}."
        layers.append({k[len(p):]: v for k, v in params.items() if k.startswith(p)})
    return GnnStack(kind, layers, eps)


def gcn_layer(g: Graph, h: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """ReLU(D^-1/2 (A + I) D^-1/2 H W + b) with D the self-loop-augmented degree."""
    if h.shape[0] != g.num_nodes:
        raise ad.ShapeError(f"features have {h.shape[0]} rows, graph has {g.num_nodes} nodes")
    dhat = g.degrees.astype(np.float64) + 1.0
    hw = h @ w
    self_part = ad.scale_rows(hw, 1.0 / dhat)
    coef = 1.0 / np.sqrt(dhat[g.src] * dhat[g.dst])
    msgs = ad.scale_rows(ad.row_gather(hw, g.src), coef)
    agg = ad.segment_sum(msgs, g.dst, g.num_nodes)
    return ad.relu(ad.add(self_part + agg, b))


def gin_layer(g: Graph, h: Tensor, eps: float, mlp: dict, edge_embed: Tensor | None = None) -> Tensor:
    """MLP((1 + eps) h_u + sum_v m(h_v, e_uv)) with m = ReLU(h_v + W_e e_uv) when
    edge features are present, otherwise m = h_v."""
    if h.shape[0] != g.num_nodes:
        raise ad.ShapeError(f"features have {h.shape[0]} rows, graph has {g.num_nodes} nodes")
    msgs = ad.row_gather(h, g.src)
    if g.edge_feats is not None:
        if edge_embed is None:
            raise ValueError("graph has edge features but the GIN layer has no edge embedding")
        e = Tensor(g.edge_feats) @ edge_embed
        msgs = ad.relu(msgs + ad.row_gather(e, g.edge_of))
    agg = ad.segment_sum(msgs, g.dst, g.num_nodes)
    z = agg + ad.scale(h, 1.0 + eps) if eps else agg + h
    hidden = ad.relu(ad.add(z @ mlp["W1"], mlp["b1"]))
    return ad.add(hidden @ mlp["W2"], mlp["b2"])


def run_stack(g: Graph, x: Tensor, stack: GnnStack) -> Tensor:
    h = x
    for layer in stack.layers:
        if stack.kind == "gcn":
            h = gcn_layer(g, h, layer["W"], layer["b"])
        else:
            h = gin_layer(g, h, stack.eps, layer, layer.get("We"))
    return h


def extract_subtree(g: Graph, x: Tensor, stack: GnnStack | None, k: int) -> Tensor:
    if k == 0:
        return x
    if stack is None or len(stack) != k:
        raise ValueError(f"k-subtree extractor with k={k} needs a {k}-layer GNN stack")
    return run_stack(g, x, stack)


@dataclass(frozen=True, eq=False)
class SubgraphBatch:
    """All k-hop induced subgraphs of a graph laid out as one disjoint union."""

    union: Graph
    node_map: np.ndarray  # union node -> parent node
    owner: np.ndarray  # union node -> centre node whose subgraph it belongs to


def subgraph_batch(g: Graph, k: int) -> SubgraphBatch:
    key = ("subgraphs", k)
    cached = g._cache.get(key)
    if cached is not None:
        return cached
    subs, maps, owners = [], [], []
    for u in range(g.num_nodes):
        s = induced_subgraph(g, k_hop_neighborhood(g, u, k), u)
        subs.append(s.graph)
        maps.append(s.mapping)
        owners.append(np.full(len(s.mapping), u, dtype=np.int64))
    batch = SubgraphBatch(
        union=disjoint_union(subs),
        node_map=np.concatenate(maps) if maps else np.zeros(0, dtype=np.int64),
        owner=np.concatenate(owners) if owners else np.zeros(0, dtype=np.int64),
    )
    g._cache[key] = batch
    return batch


def extract_subgraph(g: Graph, x: Tensor, stack: GnnStack, k: int, concat_original: bool = True) -> Tensor:
    """Sum-pool the GNN outputs of each node's induced k-hop subgraph, the GNN
    being run inside that subgraph only."""
    if k < 1:
        raise ValueError("the k-subgraph extractor needs k >= 1")
    if stack is None or len(stack) != k:
        raise ValueError(f"k-subgraph extractor with k={k} needs a {k}-layer GNN stack")
    batch = subgraph_batch(g, k)
    h = run_stack(batch.union, ad.row_gather(x, batch.node_map), stack)
    pooled = ad.segment_sum(h, batch.owner, g.num_nodes)
    if concat_original:
        return ad.concat([pooled, x], axis=1)
    return pooled


def extract(g: Graph, x: Tensor, stack: GnnStack | None, strategy: str, k: int, concat_original: bool = True) -> Tensor:
    if k == 0:
        return x
    if strategy == "subtree":
        return extract_subtree(g, x, stack, k)
    if strategy == "subgraph":
        return extract_subgraph(g, x, stack, k, concat_original)
    raise ValueError(f"unknown extractor strategy {strategy!r}")


def output_dim(in_dim: int, strategy: str, k: int, concat_original: bool) -> int:
    if k > 0 and strategy == "subgraph" and concat_original:
        return 2 * in_dim
    return in_dim
