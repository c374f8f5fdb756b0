"""Structure-aware transformer: structure-aware multi-head attention,
degree-scaled residual, FFN, layer norms, readouts and prediction heads."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import DropoutStream, ModelParams, Tensor
from .extractors import (
    GnnStack, SubgraphBatch, extract, gnn_stack_from, init_gnn_stack, output_dim, subgraph_batch, uniform_weight,
)
from .graph import Graph, build_graph, disjoint_union
from .posenc import attach_encoding, encoding_for

TASKS = ("regression", "graph-class", "node-class")
READOUTS = ("mean", "sum", "cls", "none")


class ConfigError(ValueError):
    pass


@dataclass
class SatConfig:
    num_layers: int = 6
    hidden_dim: int = 64
    num_heads: int = 8
    ffn_dim: int = 0  # 0 means 2 * hidden_dim
    k: int = 3
    extractor: str = "subtree"  # "subtree" | "subgraph"
    gnn: str = "gin"  # "gin" | "gcn"
    concat_original: bool = True
    gin_eps: float = 0.0
    pe: str = "rwpe"  # "none" | "rwpe" | "lappe"
    pe_dim: int = 20
    readout: str = "mean"
    dropout: float = 0.0
    task: str = "regression"
    output_dim: int = 1
    in_dim: int = 1  # raw node-feature width, before the positional encoding
    edge_dim: int = 0

    @property
    def ffn_width(self) -> int:
        return self.ffn_dim or 2 * self.hidden_dim

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def feature_dim(self) -> int:
        return self.in_dim + (0 if self.pe == "none" else self.pe_dim)

    @property
    def graph_level(self) -> bool:
        return self.task != "node-class"

    def validate(self) -> "SatConfig":
        if self.num_layers < 0 or self.hidden_dim < 1 or self.num_heads < 1:
            raise ConfigError("num_layers >= 0, hidden_dim >= 1 and num_heads >= 1 required")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.k < 0:
            raise ConfigError("k must be >= 0")
        if self.extractor not in ("subtree", "subgraph"):
            raise ConfigError(f"unknown extractor {self.extractor!r}")
        if self.extractor == "subgraph" and self.k == 0:
            raise ConfigError("the subgraph extractor needs k >= 1 (k=0 is the plain transformer; use extractor=subtree)")
        if self.gnn not in ("gin", "gcn"):
            raise ConfigError(f"unknown gnn {self.gnn!r}")
        if self.pe not in ("none", "rwpe", "lappe"):
            raise ConfigError(f"unknown pe {self.pe!r}")
        if self.pe != "none" and self.pe_dim < 1:
            raise ConfigError("pe_dim must be >= 1")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.readout not in READOUTS:
            raise ConfigError(f"unknown readout {self.readout!r}")
        if self.graph_level == (self.readout == "none"):
            raise ConfigError(f"readout {self.readout!r} is invalid for task {self.task!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SatConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SatLayerParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    wo: Tensor
    bo: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    norm1_g: Tensor
    norm1_b: Tensor
    norm2_g: Tensor
    norm2_b: Tensor
    stack: GnnStack | None


@dataclass
class AttentionTrace:
    """Attention matrices indexed ``weights[layer][head]``."""

    weights: list = field(default_factory=list)
    cls_index: int | None = None

    def to_json_dict(self, node_labels=None) -> dict:
        records = []
        for li, heads in enumerate(self.weights):
            for hi, w in enumerate(heads):
                labels = list(range(w.shape[0])) if node_labels is None else list(node_labels)
                rec = {"layer": li, "head": hi, "nodes": labels, "weights": w.tolist()}
                if self.cls_index is not None:
                    rec["cls_row"] = w[self.cls_index].tolist()
                records.append(rec)
        return {"cls_index": self.cls_index, "records": records}

    def to_json(self, node_labels=None) -> str:
        return json.dumps(self.to_json_dict(node_labels), indent=1)


def init_params(cfg: SatConfig, seed: int = 0) -> ModelParams:
    cfg.validate()
    rng = np.random.default_rng(seed)
    h = cfg.hidden_dim
    arrays = {
        "input.W": uniform_weight(rng, cfg.feature_dim, (cfg.feature_dim, h)),
        "input.b": np.zeros(h),
    }
    if cfg.readout == "cls":
        arrays["cls"] = uniform_weight(rng, h, (1, h))
    dphi = output_dim(h, cfg.extractor, cfg.k, cfg.concat_original)
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        if cfg.k > 0:
            arrays.update(init_gnn_stack(cfg.gnn, cfg.k, h, cfg.edge_dim, rng, prefix=p + "gnn."))
        arrays[p + "Wq"] = uniform_weight(rng, dphi, (dphi, h))
        arrays[p + "bq"] = np.zeros(h)
        arrays[p + "Wk"] = uniform_weight(rng, dphi, (dphi, h))
        arrays[p + "bk"] = np.zeros(h)
        arrays[p + "Wv"] = uniform_weight(rng, h, (h, h))
        arrays[p + "Wo"] = uniform_weight(rng, h, (h, h))
        arrays[p + "bo"] = np.zeros(h)
        arrays[p + "ffn.W1"] = uniform_weight(rng, h, (h, cfg.ffn_width))
        arrays[p + "ffn.b1"] = np.zeros(cfg.ffn_width)
        arrays[p + "ffn.W2"] = uniform_weight(rng, cfg.ffn_width, (cfg.ffn_width, h))
        arrays[p + "ffn.b2"] = np.zeros(h)
        arrays[p + "norm1.g"] = np.ones(h)
        arrays[p + "norm1.b"] = np.zeros(h)
        arrays[p + "norm2.g"] = np.ones(h)
        arrays[p + "norm2.b"] = np.zeros(h)
    arrays["head.W"] = uniform_weight(rng, h, (h, cfg.output_dim))
    arrays["head.b"] = np.zeros(cfg.output_dim)
    return ModelParams({k: Tensor(np.ascontiguousarray(v), requires_grad=True) for k, v in arrays.items()})


def layer_params(params: ModelParams, i: int, cfg: SatConfig) -> SatLayerParams:
    p = f"layers.{i}."
    stack = gnn_stack_from(params, p + "gnn.", cfg.gnn, cfg.k, cfg.gin_eps) if cfg.k > 0 else None
    return SatLayerParams(
        wq=params[p + "Wq"], bq=params[p + "bq"], wk=params[p + "Wk"], bk=params[p + "bk"],
        wv=params[p + "Wv"], wo=params[p + "Wo"], bo=params[p + "bo"],
        w1=params[p + "ffn.W1"], b1=params[p + "ffn.b1"], w2=params[p + "ffn.W2"], b2=params[p + "ffn.b2"],
        norm1_g=params[p + "norm1.g"], norm1_b=params[p + "norm1.b"],
        norm2_g=params[p + "norm2.g"], norm2_b=params[p + "norm2.b"],
        stack=stack,
    )


@dataclass(frozen=True, eq=False)
class AttentionPairs:
    """Node pairs that attend to each other: every ordered pair inside each
    block of consecutive rows, grouped by query row."""

    rows: np.ndarray
    cols: np.ndarray
    indptr: np.ndarray  # pairs of query row i are indptr[i]:indptr[i + 1]
    offsets: np.ndarray  # block b covers rows offsets[b]:offsets[b + 1]

    @classmethod
    def blocks(cls, sizes) -> "AttentionPairs":
        sizes = np.asarray(sizes, dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        rows = [o + np.repeat(np.arange(m), m) for o, m in zip(offsets[:-1], sizes)]
        cols = [o + np.tile(np.arange(m), m) for o, m in zip(offsets[:-1], sizes)]
        cat = lambda parts: np.concatenate(parts).astype(np.int64) if parts else np.zeros(0, dtype=np.int64)
        indptr = np.concatenate([[0], np.cumsum(np.repeat(sizes, sizes))]).astype(np.int64)
        return cls(cat(rows), cat(cols), indptr, offsets)

    def matrices(self, weights: np.ndarray) -> list:
        """Per block, per head dense ``(m, m)`` weight matrices."""
        out, start = [], 0
        for m in np.diff(self.offsets):
            block = weights[start:start + m * m].reshape(m, m, -1)
            out.append([block[:, :, h].copy() for h in range(weights.shape[1])])
            start += m * m
        return out


def sa_attention(g: Graph, x: Tensor, lp: SatLayerParams, cfg: SatConfig, pairs: AttentionPairs | None = None):
    """Multi-head attention whose queries and keys come from the structure
    extractor and whose values come from ``x``.  Every node attends to every
    node of its own graph (``pairs`` separates the graphs of a batch).

    Returns the projected output and the ``(num_pairs, num_heads)`` weights.
    """
    if x.shape[0] != g.num_nodes:
        raise ad.ShapeError(f"features have {x.shape[0]} rows, graph has {g.num_nodes} nodes")
    if pairs is None:
        pairs = g._cache.get("pairs")
        if pairs is None:
            pairs = g._cache.setdefault("pairs", AttentionPairs.blocks([g.num_nodes]))
    hphi = extract(g, x, lp.stack, cfg.extractor, cfg.k, cfg.concat_original)
    q = ad.add(hphi @ lp.wq, lp.bq)
    k = ad.add(hphi @ lp.wk, lp.bk)
    v = x @ lp.wv
    scores = ad.scale(ad.pair_scores(q, k, pairs.rows, pairs.cols, cfg.num_heads), 1.0 / np.sqrt(cfg.head_dim))
    att = ad.segment_softmax(scores, pairs.indptr)
    heads = ad.pair_aggregate(att, v, pairs.rows, pairs.cols, g.num_nodes)
    return ad.add(heads @ lp.wo, lp.bo), att.data


def degree_scale(g: Graph) -> np.ndarray:
    return 1.0 / np.sqrt(np.maximum(g.degrees, 1).astype(np.float64))


def sat_layer(g: Graph, x: Tensor, lp: SatLayerParams, cfg: SatConfig, train=False, stream=None, pairs=None):
    attn, weights = sa_attention(g, x, lp, cfg, pairs)
    attn = ad.dropout(attn, cfg.dropout, train, stream)
    x1 = ad.layer_norm(x + ad.scale_rows(attn, degree_scale(g)), lp.norm1_g, lp.norm1_b)
    ff = ad.add(ad.relu(ad.add(x1 @ lp.w1, lp.b1)) @ lp.w2, lp.b2)
    x2 = ad.layer_norm(x1 + ad.dropout(ff, cfg.dropout, train, stream), lp.norm2_g, lp.norm2_b)
    return x2, weights


def with_cls_node(g: Graph) -> Graph:
    """``g`` plus one isolated node (the last row) that stands for the CLS token."""
    cached = g._cache.get("cls")
    if cached is None:
        feats = np.vstack([g.node_feats, np.zeros((1, g.feat_dim))])
        cached = build_graph(g.num_nodes + 1, g.edges, feats, g.edge_feats)
        g._cache["cls"] = cached
    return cached


def prepare_graph(g: Graph, cfg: SatConfig) -> Graph:
    """Attach the positional encoding ``cfg`` asks for (cached per graph)."""
    key = ("pe", cfg.pe, cfg.pe_dim)
    out = g._cache.get(key)
    if out is None:
        out = attach_encoding(g, encoding_for(g, cfg.pe, cfg.pe_dim))
        g._cache[key] = out
    return out


@dataclass(frozen=True, eq=False)
class GraphBatch:
    """Prepared graphs laid out as one disjoint union.

    Member ``b`` owns union rows ``pairs.offsets[b]:pairs.offsets[b + 1]``; with
    a CLS readout the last of those rows is its CLS node.
    """

    union: Graph
    pairs: AttentionPairs
    sizes: np.ndarray  # real node count per member
    real_rows: np.ndarray
    member_of_real: np.ndarray
    cls_rows: np.ndarray | None

    def __len__(self):
        return len(self.sizes)


def _compose_subgraph_batches(members, k) -> SubgraphBatch:
    parts = [subgraph_batch(m, k) for m in members]
    offsets = np.concatenate([[0], np.cumsum([m.num_nodes for m in members])])
    return SubgraphBatch(
        union=disjoint_union([p.union for p in parts]),
        node_map=np.concatenate([p.node_map + o for p, o in zip(parts, offsets)]),
        owner=np.concatenate([p.owner + o for p, o in zip(parts, offsets)]),
    )


def make_batch(graphs, cfg: SatConfig) -> GraphBatch:
    """Batch graphs that already carry their positional encoding."""
    graphs = list(graphs)
    if not graphs:
        raise ValueError("empty batch")
    use_cls = cfg.readout == "cls"
    key = ("batch", use_cls, cfg.edge_dim, cfg.feature_dim)
    if len(graphs) == 1 and key in graphs[0]._cache:
        return graphs[0]._cache[key]
    members = []
    for g in graphs:
        if g.feat_dim != cfg.feature_dim:
            hint = "" if cfg.pe == "none" else f" (expected {cfg.in_dim} features + {cfg.pe_dim} {cfg.pe}; is the positional encoding attached?)"
            raise ConfigError(f"graph has {g.feat_dim} feature columns, the model expects {cfg.feature_dim}{hint}")
        if cfg.edge_dim and g.edge_dim != cfg.edge_dim:
            raise ConfigError(f"graph has {g.edge_dim} edge feature columns, config expects {cfg.edge_dim}")
        if cfg.edge_dim == 0 and g.edge_feats is not None:
            g = g._cache.setdefault("no-edge-feats", build_graph(g.num_nodes, g.edges, g.node_feats))
        members.append(with_cls_node(g) if use_cls else g)
    union = members[0] if len(members) == 1 else disjoint_union(members)
    if len(members) > 1 and cfg.k > 0 and cfg.extractor == "subgraph":
        union._cache[("subgraphs", cfg.k)] = _compose_subgraph_batches(members, cfg.k)
    msizes = np.array([m.num_nodes for m in members], dtype=np.int64)
    sizes = msizes - int(use_cls)
    pairs = members[0]._cache.get("pairs") if len(members) == 1 else None
    if pairs is None:
        pairs = AttentionPairs.blocks(msizes)
        if len(members) == 1:
            members[0]._cache["pairs"] = pairs
    starts = pairs.offsets[:-1]
    real_rows = np.concatenate([o + np.arange(m) for o, m in zip(starts, sizes)]).astype(np.int64)
    batch = GraphBatch(
        union=union,
        pairs=pairs,
        sizes=sizes,
        real_rows=real_rows,
        member_of_real=np.repeat(np.arange(len(sizes)), sizes),
        cls_rows=(pairs.offsets[1:] - 1) if use_cls else None,
    )
    if len(graphs) == 1:
        graphs[0]._cache[key] = batch
    return batch


def encode_batch(batch: GraphBatch, cfg: SatConfig, params: ModelParams, train=False,
                 stream: DropoutStream | None = None, keep_weights=False):
    """Node representations of the whole union after the last layer, plus the
    per-layer ``(num_pairs, num_heads)`` attention weights when requested."""
    g = batch.union
    x = ad.add(Tensor(g.node_feats) @ params["input.W"], params["input.b"])
    if batch.cls_rows is not None:
        index = np.arange(g.num_nodes)
        index[batch.cls_rows] = g.num_nodes
        x = ad.row_gather(ad.concat([x, params["cls"]], axis=0), index)
    weights = []
    for i in range(cfg.num_layers):
        x, w = sat_layer(g, x, layer_params(params, i, cfg), cfg, train, stream, batch.pairs)
        if keep_weights:
            weights.append(w)
    return x, weights


def pool_batch(x: Tensor, batch: GraphBatch, method: str) -> Tensor:
    """Graph vectors ``(batch size, d)``; CLS rows never enter mean/sum pooling."""
    if method == "cls":
        if batch.cls_rows is None:
            raise ValueError("cls readout without a CLS node")
        return ad.row_gather(x, batch.cls_rows)
    rows = x if batch.cls_rows is None else ad.row_gather(x, batch.real_rows)
    total = ad.segment_sum(rows, batch.member_of_real, len(batch))
    if method == "sum":
        return total
    if method == "mean":
        return ad.scale_rows(total, 1.0 / np.maximum(batch.sizes, 1))
    raise ValueError(f"unknown readout {method!r}")


def forward_batch(batch: GraphBatch, cfg: SatConfig, params: ModelParams, train=False,
                  stream: DropoutStream | None = None, keep_weights=False):
    """Predictions for a batch: ``(batch size, output_dim)`` for graph tasks,
    ``(total real nodes, output_dim)`` for node tasks, plus the raw weights."""
    x, weights = encode_batch(batch, cfg, params, train, stream, keep_weights)
    if cfg.graph_level:
        pooled = pool_batch(x, batch, cfg.readout)
    else:
        pooled = x if batch.cls_rows is None else ad.row_gather(x, batch.real_rows)
    return ad.add(pooled @ params["head.W"], params["head.b"]), weights


def split_predictions(pred: np.ndarray, batch: GraphBatch, cfg: SatConfig) -> list:
    """Per-member prediction arrays: ``(1, out)`` per graph or ``(n_b, out)`` per node set."""
    if cfg.graph_level:
        return [pred[b:b + 1] for b in range(len(batch))]
    return np.split(pred, np.cumsum(batch.sizes)[:-1])


def _trace(batch, weights, member=0) -> AttentionTrace:
    trace = AttentionTrace(cls_index=None if batch.cls_rows is None else int(batch.sizes[member]))
    trace.weights = [batch.pairs.matrices(w)[member] for w in weights]
    return trace


def encode(g: Graph, cfg: SatConfig, params: ModelParams, train=False, stream: DropoutStream | None = None):
    """Node representations of one prepared graph after the last layer, with the
    CLS row appended last when ``cfg.readout == "cls"``."""
    batch = make_batch([g], cfg)
    x, weights = encode_batch(batch, cfg, params, train, stream, keep_weights=True)
    return x, _trace(batch, weights)


def forward(g: Graph, cfg: SatConfig, params: ModelParams, train=False, stream: DropoutStream | None = None):
    """Prediction for one prepared graph: ``(1, output_dim)`` for graph tasks,
    ``(n, output_dim)`` for node tasks, plus the attention trace."""
    batch = make_batch([g], cfg)
    pred, weights = forward_batch(batch, cfg, params, train, stream, keep_weights=True)
    return pred, _trace(batch, weights)


def readout(x: Tensor, method: str, cls_index: int | None = None) -> Tensor:
    """Pool the rows of one graph into a ``(1, d)`` vector (CLS row excluded from mean/sum)."""
    n = x.shape[0] - (cls_index is not None)
    sizes = np.array([n])
    batch = GraphBatch(union=None, pairs=None, sizes=sizes, real_rows=np.arange(n),
                       member_of_real=np.zeros(n, dtype=np.int64),
                       cls_rows=None if cls_index is None else np.array([cls_index]))
    return pool_batch(x, batch, method)


def graph_embedding(g: Graph, cfg: SatConfig, params: ModelParams) -> np.ndarray:
    x, trace = encode(g, cfg, params)
    return readout(x, cfg.readout, trace.cls_index).data[0]
