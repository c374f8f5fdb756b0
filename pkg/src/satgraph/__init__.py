"""Structure-aware transformer for graphs on a small numpy autodiff engine."""

from .datasets import (
    Dataset, GraphSample, gen_cycle_vs_triangles, gen_sbm_node_classification, gen_triangle_count_regression,
    load_jsonl, save_jsonl, split,
)
from .graph import Graph, build_graph, disjoint_union, k_hop_neighborhood, permute_graph
from .model import SatConfig, encode, forward, graph_embedding, init_params, make_batch, prepare_graph
from .posenc import lap_pe, rwpe
from .train import TrainConfig, evaluate, load_checkpoint, predict, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Dataset", "Graph", "GraphSample", "SatConfig", "TrainConfig", "build_graph", "disjoint_union", "encode",
    "evaluate", "forward", "gen_cycle_vs_triangles", "gen_sbm_node_classification", "gen_triangle_count_regression",
    "graph_embedding", "init_params", "k_hop_neighborhood", "lap_pe", "load_checkpoint", "load_jsonl",
    "make_batch", "permute_graph", "predict", "prepare_graph", "rwpe", "save_checkpoint", "save_jsonl", "split",
    "train",
]
