"""Synthetic graph corpora, the JSONL corpus format and train/val/test splits."""

from __future__ import annotations

import gzip
import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .graph import Graph, build_graph, permute_graph


class SchemaError(ValueError):
    pass


@dataclass(eq=False)
class GraphSample:
    graph: Graph
    target: object  # float (regression), int (graph class) or int array (node classes)


@dataclass(eq=False)
class Dataset:
    samples: list
    task: str  # "regression" | "graph-class" | "node-class"
    splits: dict = field(default_factory=dict)  # name -> index array

    def __len__(self):
        return len(self.samples)

    @property
    def feat_dim(self) -> int:
        return self.samples[0].graph.feat_dim if self.samples else 0

    @property
    def edge_dim(self) -> int:
        return self.samples[0].graph.edge_dim if self.samples else 0

    @property
    def num_classes(self) -> int:
        if self.task == "regression":
            return 1
        return int(max(np.max(s.target) for s in self.samples)) + 1

    def indices(self, name: str) -> np.ndarray:
        if name in self.splits:
            return np.asarray(self.splits[name], dtype=np.int64)
        if name == "train" and not self.splits:
            return np.arange(len(self.samples))
        return np.zeros(0, dtype=np.int64)

    def subset(self, name: str) -> list:
        return [self.samples[i] for i in self.indices(name)]


def _targets_equal(a, b) -> bool:
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return isinstance(a, np.ndarray) and isinstance(b, np.ndarray) and np.array_equal(a, b)
    return type(a) is type(b) and a == b


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    if a.task != b.task or len(a) != len(b):
        return False
    return all(sa.graph == sb.graph and _targets_equal(sa.target, sb.target) for sa, sb in zip(a.samples, b.samples))


# ---------------------------------------------------------------------------
# generators


def count_triangles(g: Graph) -> int:
    return int(_kernels.triangles(g.adjacency().astype(np.bool_)))


def gen_cycle_vs_triangles(n_graphs: int, seed: int) -> Dataset:
    """Class 0: a 6-cycle.  Class 1: two disjoint triangles.  Constant features,
    node order shuffled per sample; 1-WL cannot tell the classes apart."""
    if n_graphs % 2:
        raise ValueError("n_graphs must be even for exact class balance")
    rng = np.random.default_rng(seed)
    c6 = [(i, (i + 1) % 6) for i in range(6)]
    two_c3 = [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)]
    samples = []
    for i in range(n_graphs):
        label = i % 2
        g = build_graph(6, two_c3 if label else c6, np.ones((6, 1)))
        samples.append(GraphSample(permute_graph(g, rng.permutation(6)), label))
    order = rng.permutation(n_graphs)
    return Dataset([samples[i] for i in order], "graph-class")


def erdos_renyi_edges(n: int, p: float, rng) -> list:
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < p
    return list(zip(iu[keep].tolist(), ju[keep].tolist()))


def gen_triangle_count_regression(n_graphs: int, n_nodes: int, edge_prob: float, seed: int) -> Dataset:
    if n_nodes > 30:
        raise ValueError("n_nodes must be <= 30")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n_graphs):
        g = build_graph(n_nodes, erdos_renyi_edges(n_nodes, edge_prob, rng), np.ones((n_nodes, 1)))
        samples.append(GraphSample(g, float(count_triangles(g))))
    return Dataset(samples, "regression")


def gen_sbm_node_classification(n_graphs: int, blocks, p_in: float, p_out: float, seed: int) -> Dataset:
    """Stochastic-block-model graphs labelled by block.

    Features have ``len(blocks) + 1`` columns: column 0 is 1 for ordinary
    nodes; one randomly chosen node per block instead carries the one-hot of
    its block in columns 1..B.
    """
    blocks = [int(b) for b in blocks]
    if len(blocks) < 2 or min(blocks) < 1:
        raise ValueError("need at least two blocks, each with at least one node")
    if not p_in > p_out:
        raise ValueError("p_in must exceed p_out")
    rng = np.random.default_rng(seed)
    n = sum(blocks)
    nb = len(blocks)
    labels = np.repeat(np.arange(nb), blocks)
    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    samples = []
    for _ in range(n_graphs):
        prob = np.where(same, p_in, p_out)
        keep = rng.random(len(iu)) < prob
        feats = np.zeros((n, nb + 1))
        feats[:, 0] = 1.0
        for b in range(nb):
            v = rng.choice(np.flatnonzero(labels == b))
            feats[v, 0] = 0.0
            feats[v, b + 1] = 1.0
        perm = rng.permutation(n)
        g = build_graph(n, np.stack([iu[keep], ju[keep]], axis=1), feats)
        g = permute_graph(g, perm)
        y = np.empty(n, dtype=np.int64)
        y[perm] = labels
        samples.append(GraphSample(g, y))
    return Dataset(samples, "node-class")


GENERATORS = {
    "cycle-vs-triangles": gen_cycle_vs_triangles,
    "triangle-count": gen_triangle_count_regression,
    "sbm": gen_sbm_node_classification,
}


# ---------------------------------------------------------------------------
# JSONL corpus format


def _open(path, mode):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode + "t", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def _target_to_json(y):
    if isinstance(y, np.ndarray):
        return [int(v) for v in y]
    if isinstance(y, (bool, np.bool_)):
        raise SchemaError("boolean targets are not supported")
    if isinstance(y, (int, np.integer)):
        return int(y)
    return float(y)


def sample_to_record(s: GraphSample) -> dict:
    g = s.graph
    rec = {"num_nodes": g.num_nodes, "edges": g.edges.tolist(), "node_feat": g.node_feats.tolist()}
    if g.edge_feats is not None:
        rec["edge_feat"] = g.edge_feats.tolist()
    rec["y"] = _target_to_json(s.target)
    return rec


def save_jsonl(dataset: Dataset, path):
    # json writes floats with repr(), the shortest string that round-trips exactly
    with _open(path, "w") as fh:
        for s in dataset.samples:
            fh.write(json.dumps(sample_to_record(s)) + "\n")


def _task_of(y):
    if isinstance(y, list):
        return "node-class"
    if isinstance(y, bool):
        return None
    if isinstance(y, int):
        return "graph-class"
    if isinstance(y, float):
        return "regression"
    return None


def record_to_sample(rec, lineno=0) -> tuple:
    where = f"line {lineno}"
    if not isinstance(rec, dict):
        raise SchemaError(f"{where}: expected a JSON object")
    for key in ("num_nodes", "edges", "node_feat", "y"):
        if key not in rec:
            raise SchemaError(f"{where}: missing {key!r}")
    task = _task_of(rec["y"])
    if task is None:
        raise SchemaError(f"{where}: 'y' must be a number, an integer or a list of integers")
    try:
        n = int(rec["num_nodes"])
        feats = np.asarray(rec["node_feat"], dtype=np.float64).reshape(n, -1) if n else np.zeros((0, 0))
        g = build_graph(n, rec["edges"], feats, rec.get("edge_feat"))
    except (ValueError, TypeError) as exc:
        raise SchemaError(f"{where}: {exc}") from exc
    y = rec["y"]
    if task == "node-class":
        y = np.asarray(y, dtype=np.int64)
        if y.shape != (n,):
            raise SchemaError(f"{where}: node targets have {len(y)} entries for {n} nodes")
    return GraphSample(g, y), task


def load_jsonl(path) -> Dataset:
    samples, task, dims = [], None, None
    with _open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            s, t = record_to_sample(rec, lineno)
            if task is not None and t != task:
                raise SchemaError(f"line {lineno}: target kind {t} differs from earlier {task}")
            d = (s.graph.feat_dim, s.graph.edge_dim)
            if dims is not None and d != dims:
                raise SchemaError(f"line {lineno}: feature dims {d} differ from earlier {dims}")
            task, dims = t, d
            samples.append(s)
    return Dataset(samples, task or "regression")


# ---------------------------------------------------------------------------
# splits


def _cut(n, fractions):
    counts = [int(round(f * n)) for f in fractions[:-1]]
    counts.append(n - sum(counts))
    if counts[-1] < 0:
        raise ValueError("split fractions over-allocate")
    return counts


def split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0, stratify: bool = False) -> Dataset:
    """Seeded train/val/test split; returns a dataset sharing the same samples."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    if stratify and dataset.task != "graph-class":
        raise ValueError("stratified splits need graph-level class targets")
    rng = np.random.default_rng(seed)
    names = ("train", "val", "test")
    parts = {k: [] for k in names}
    if stratify:
        labels = np.array([int(s.target) for s in dataset.samples])
        for c in np.unique(labels):
            idx = rng.permutation(np.flatnonzero(labels == c))
            for name, chunk in zip(names, np.split(idx, np.cumsum(_cut(len(idx), fractions))[:-1])):
                parts[name].extend(chunk.tolist())
        splits = {k: np.sort(np.array(v, dtype=np.int64)) for k, v in parts.items()}
    else:
        idx = rng.permutation(len(dataset))
        chunks = np.split(idx, np.cumsum(_cut(len(idx), fractions))[:-1])
        splits = {k: np.sort(c.astype(np.int64)) for k, c in zip(names, chunks)}
    return Dataset(dataset.samples, dataset.task, splits)

