"""Executable checks of the model's mathematical claims.

Each ``check_*`` function evaluates one claim on concrete inputs; the
``run_*`` harnesses sample many random instances and return JSON-ready
reports (used by ``satgraph verify``).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels
from .autodiff import ModelParams, Tensor, grad_check
from .datasets import erdos_renyi_edges
from .extractors import GnnStack, extract, init_gnn_stack, gnn_stack_from, output_dim
from .graph import Graph, build_graph, cycle_graph, disjoint_union, permute_graph
from .model import SatConfig, encode, forward, init_params, layer_params, prepare_graph, sa_attention
from .posenc import normalized_laplacian, sym_eig
from .train import loss

MAX_MATCHING_SIZE = 8


class PreconditionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# matching metric and norms


def matching_metric_D(a, b) -> float:
    """Bottleneck matching distance: min over bijections of the max pairwise
    Euclidean distance.  Exact (enumerates permutations), so |A| <= 8."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if len(a) != len(b):
        raise PreconditionError(f"multisets differ in size ({len(a)} vs {len(b)})")
    if len(a) > MAX_MATCHING_SIZE:
        raise PreconditionError(f"matching metric is exact only up to {MAX_MATCHING_SIZE} elements")
    dist = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
    return float(_kernels.bottleneck(np.ascontiguousarray(dist)))


def spectral_norm(w, tol=1e-10, max_iter=100_000) -> float:
    """Largest singular value by power iteration on W^T W."""
    w = np.asarray(w, dtype=np.float64)
    if not w.size or not np.any(w):
        return 0.0
    m = w.T @ w
    v = np.random.default_rng(0).standard_normal(m.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        mv = m @ v
        lam = float(v @ mv)
        if np.linalg.norm(mv - lam * v) <= tol * max(lam, 1e-300):
            break
        v = mv / np.linalg.norm(mv)
    return math.sqrt(max(lam, 0.0))


def single_head_attention(h, x, wq, wk, wv, bq=None, bk=None):
    """softmax((h Wq + bq)(h Wk + bk)^T / sqrt(d_out)) (x Wv), in plain numpy."""
    q = h @ wq + (0.0 if bq is None else bq)
    k = h @ wk + (0.0 if bk is None else bk)
    s = q @ k.T / math.sqrt(wq.shape[1])
    s = np.exp(s - s.max(axis=1, keepdims=True))
    return (s / s.sum(axis=1, keepdims=True)) @ (x @ wv)


# ---------------------------------------------------------------------------
# structure-distance bound


@dataclass
class AttentionProbe:
    """A single attention head with its structure extractor (numpy weights)."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    stack: GnnStack | None
    strategy: str = "subtree"
    k: int = 0
    concat_original: bool = True
    bq: np.ndarray | None = None
    bk: np.ndarray | None = None

    def phi(self, g: Graph) -> np.ndarray:
        return extract(g, Tensor(g.node_feats), self.stack, self.strategy, self.k, self.concat_original).data

    def attend(self, g: Graph, x=None, h=None) -> np.ndarray:
        h = self.phi(g) if h is None else h
        x = g.node_feats if x is None else x
        return single_head_attention(h, x, self.wq, self.wk, self.wv, self.bq, self.bk)


@dataclass
class Theorem1Report:
    lhs: float
    rhs: float
    c1: float
    c2: float
    lip_f: float
    c_phi: float
    d_xx: float
    d_hh: float
    h_dist: float
    holds: bool

    def to_dict(self):
        return asdict(self)


def check_theorem1(g: Graph, g2: Graph, v: int, v2: int, probe: AttentionProbe, tol: float = 1e-9) -> Theorem1Report:
    """Evaluate both sides of the structure-distance bound

        |SA(v) - SA'(v')| <= C1 (|h_v - h'_v'| + D(H, H')) + C2 D(X, X')

    with C1 = sqrt(2/d_out) n Lip(f) C_phi |Wq| |Wk|, C2 = Lip(f), spectral
    norms, f(x) = x Wv and no query/key offsets.  The bound uses
    |f(x_w)| <= Lip(f), so node features must lie in the unit ball.
    """
    n = g.num_nodes
    if g2.num_nodes != n:
        raise PreconditionError("graphs must have the same number of nodes")
    if n > MAX_MATCHING_SIZE:
        raise PreconditionError(f"at most {MAX_MATCHING_SIZE} nodes supported")
    if probe.bq is not None or probe.bk is not None:
        raise PreconditionError("the bound is stated for attention without query/key offsets")
    for gr in (g, g2):
        if gr.num_nodes and np.linalg.norm(gr.node_feats, axis=1).max() > 1.0 + 1e-12:
            raise PreconditionError("node features must have norm <= 1")
    h, h2 = probe.phi(g), probe.phi(g2)
    out, out2 = probe.attend(g, h=h), probe.attend(g2, h=h2)
    vals = [out, out2, h, h2]
    if not all(np.isfinite(a).all() for a in vals):
        raise FloatingPointError("non-finite attention or extractor output")
    d_out = probe.wq.shape[1]
    lip = spectral_norm(probe.wv)
    c_phi = float(max(np.linalg.norm(h, axis=1).max(), np.linalg.norm(h2, axis=1).max()))
    c1 = math.sqrt(2.0 / d_out) * n * lip * c_phi * spectral_norm(probe.wq) * spectral_norm(probe.wk)
    c2 = lip
    d_hh = matching_metric_D(h, h2)
    d_xx = matching_metric_D(g.node_feats, g2.node_feats)
    h_dist = float(np.linalg.norm(h[v] - h2[v2]))
    lhs = float(np.linalg.norm(out[v] - out2[v2]))
    rhs = c1 * (h_dist + d_hh) + c2 * d_xx
    return Theorem1Report(lhs, rhs, c1, c2, lip, c_phi, d_xx, d_hh, h_dist, lhs <= rhs + tol)


def random_probe(rng, d_in: int, d_out: int, strategy: str, gnn: str, k: int, scale=1.0) -> AttentionProbe:
    stack = None
    if k > 0:
        arrays = init_gnn_stack(gnn, k, d_in, 0, rng)
        stack = gnn_stack_from({n: Tensor(a * scale) for n, a in arrays.items()}, "", gnn, k)
    dphi = output_dim(d_in, strategy, k, True)
    return AttentionProbe(
        wq=rng.standard_normal((dphi, d_out)) * scale,
        wk=rng.standard_normal((dphi, d_out)) * scale,
        wv=rng.standard_normal((d_in, d_out)) * scale,
        stack=stack, strategy=strategy, k=k,
    )


def random_unit_ball_features(rng, n, d):
    x = rng.standard_normal((n, d))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12) * rng.uniform(0.0, 1.0, size=(n, 1))


def random_er_graph(rng, n, p, feats) -> Graph:
    return build_graph(n, erdos_renyi_edges(n, p, rng), feats)


def run_theorem1(trials: int = 200, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    worst_ratio, violations, records = 0.0, 0, []
    for t in range(trials):
        n = int(rng.integers(3, 8))
        d = int(rng.integers(1, 5))
        d_out = int(rng.integers(1, 5))
        strategy = str(rng.choice(["subtree", "subgraph"]))
        gnn = str(rng.choice(["gin", "gcn"]))
        k = int(rng.integers(0 if strategy == "subtree" else 1, 3))
        probe = random_probe(rng, d, d_out, strategy, gnn, k, scale=float(rng.uniform(0.2, 1.5)))
        g = random_er_graph(rng, n, float(rng.uniform(0.2, 0.8)), random_unit_ball_features(rng, n, d))
        g2 = random_er_graph(rng, n, float(rng.uniform(0.2, 0.8)), random_unit_ball_features(rng, n, d))
        v, v2 = int(rng.integers(n)), int(rng.integers(n))
        rep = check_theorem1(g, g2, v, v2, probe)
        violations += not rep.holds
        if rep.rhs > 0:
            worst_ratio = max(worst_ratio, rep.lhs / rep.rhs)
        if not rep.holds:
            records.append({"trial": t, **rep.to_dict()})
    # same graph: the D terms vanish exactly
    same_ok = True
    for _ in range(max(1, trials // 10)):
        n = int(rng.integers(3, 8))
        probe = random_probe(rng, 2, 2, "subtree", "gin", 1)
        g = random_er_graph(rng, n, 0.5, random_unit_ball_features(rng, n, 2))
        rep = check_theorem1(g, g, 0, n - 1, probe)
        same_ok &= rep.d_xx == 0.0 and rep.d_hh == 0.0 and rep.holds
    return {"suite": "theorem1", "trials": trials, "violations": violations, "max_lhs_over_rhs": worst_ratio,
            "same_graph_terms_zero": bool(same_ok), "failures": records,
            "passed": violations == 0 and bool(same_ok)}


# ---------------------------------------------------------------------------
# expressivity: separating parameter search


@dataclass
class Theorem2Result:
    found: bool
    draws: int
    separation: float
    witness: dict | None


def check_theorem2_existence(g: Graph, g2: Graph, v: int, v2: int, probe: AttentionProbe,
                             n_samples: int = 50, seed: int = 0, noise: float = 1e-2,
                             d_out: int = 2, threshold: float = 1e-6) -> Theorem2Result:
    """Search random attention parameters for one that separates SA(v) from SA'(v').

    The extractor (``probe.stack``) stays fixed; W_Q, W_K, b_Q, b_K, W_V are
    redrawn each sample.  Node features get small per-node noise so that all
    nodes carry distinct attributes.  Requires phi(v, G) != phi(v', G') on the
    noise-free features.
    """
    h, h2 = probe.phi(g), probe.phi(g2)
    if h.shape[1] != h2.shape[1] or np.array_equal(h[v], h2[v2]):
        raise PreconditionError("structure representations of v and v' coincide")
    rng = np.random.default_rng(seed)
    x = g.node_feats + noise * rng.standard_normal(g.node_feats.shape)
    x2 = g2.node_feats + noise * rng.standard_normal(g2.node_feats.shape)
    gn, gn2 = g.with_node_feats(x), g2.with_node_feats(x2)
    hn, hn2 = probe.phi(gn), probe.phi(gn2)
    dphi, d = hn.shape[1], x.shape[1]
    best = 0.0
    for draw in range(1, n_samples + 1):
        wq, wk = rng.standard_normal((dphi, d_out)), rng.standard_normal((dphi, d_out))
        bq, bk = rng.standard_normal(d_out), rng.standard_normal(d_out)
        wv = rng.standard_normal((d, d_out))
        a = single_head_attention(hn, x, wq, wk, wv, bq, bk)[v]
        b = single_head_attention(hn2, x2, wq, wk, wv, bq, bk)[v2]
        sep = float(np.linalg.norm(a - b))
        best = max(best, sep)
        if sep > threshold:
            witness = {"wq": wq.tolist(), "wk": wk.tolist(), "bq": bq.tolist(), "bk": bk.tolist(), "wv": wv.tolist()}
            return Theorem2Result(True, draw, sep, witness)
    return Theorem2Result(False, n_samples, best, None)


def identity_gin_probe(k: int = 1, d: int = 1) -> AttentionProbe:
    """k-subgraph GIN extractor with eps = 0 and identity MLP weights."""
    layers = [{"W1": Tensor(np.eye(d)), "b1": Tensor(np.zeros(d)), "W2": Tensor(np.eye(d)), "b2": Tensor(np.zeros(d))}
              for _ in range(k)]
    dphi = 2 * d
    return AttentionProbe(np.zeros((dphi, 1)), np.zeros((dphi, 1)), np.zeros((d, 1)),
                          GnnStack("gin", layers), "subgraph", k, True)


def cycle_and_triangles():
    c6 = cycle_graph(6)
    two_c3 = disjoint_union([cycle_graph(3), cycle_graph(3)])
    return c6, two_c3


def run_theorem2(runs: int = 20, seed: int = 0, n_samples: int = 50) -> dict:
    c6, two_c3 = cycle_and_triangles()
    probe = identity_gin_probe(1)
    draws = []
    for r in range(runs):
        res = check_theorem2_existence(c6, two_c3, 0, 0, probe, n_samples=n_samples, seed=seed * 1000 + r)
        draws.append(res.draws if res.found else None)
    found = sum(d is not None for d in draws)
    return {"suite": "theorem2", "runs": runs, "found": found, "draws": draws,
            "phi": [probe.phi(c6)[0].tolist(), probe.phi(two_c3)[0].tolist()], "passed": found == runs}


# ---------------------------------------------------------------------------
# attention as a kernel smoother


def kernel_smoother_attention(x, lp, cfg) -> np.ndarray:
    """Per-node kernel-smoother evaluation, sum_u k(x_v, x_u) f(x_u) / sum_w k(x_v, x_w)
    with k(a, b) = exp(<a Wq + bq, b Wk + bk> / sqrt(d)), looped explicitly."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    dh = cfg.head_dim
    wq, wk, wv = lp.wq.data, lp.wk.data, lp.wv.data
    bq, bk = lp.bq.data, lp.bk.data
    out = np.zeros((n, cfg.hidden_dim))
    for hd in range(cfg.num_heads):
        cols = slice(hd * dh, (hd + 1) * dh)
        for v in range(n):
            qv = x[v] @ wq[:, cols] + bq[cols]
            kappa = [math.exp(float(qv @ (x[u] @ wk[:, cols] + bk[cols])) / math.sqrt(dh)) for u in range(n)]
            den = math.fsum(kappa)
            acc = np.zeros(dh)
            for u in range(n):
                acc += (kappa[u] / den) * (x[u] @ wv[:, cols])
            out[v, cols] = acc
    return out @ lp.wo.data + lp.bo.data


def check_kernel_smoother_identity(x, params: ModelParams, cfg: SatConfig, layer: int = 0) -> float:
    """Max |matrix-form attention - kernel-smoother form| with the identity (k=0) extractor."""
    if cfg.k != 0:
        raise PreconditionError("the kernel-smoother identity is stated for the identity extractor (k=0)")
    x = np.asarray(x, dtype=np.float64)
    g = build_graph(x.shape[0], [], x)
    lp = layer_params(params, layer, cfg)
    matrix_form, _ = sa_attention(g, Tensor(x), lp, cfg)
    return float(np.abs(matrix_form.data - kernel_smoother_attention(x, lp, cfg)).max())


def run_smoother(trials: int = 100, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        heads = int(rng.choice([1, 2, 4]))
        cfg = SatConfig(num_layers=1, hidden_dim=8, num_heads=heads, k=0, pe="none", in_dim=8).validate()
        params = init_params(cfg, int(rng.integers(1 << 31)))
        for name in ("layers.0.bq", "layers.0.bk", "layers.0.bo"):
            params[name].data[:] = rng.standard_normal(params[name].shape) * 0.5
        x = rng.standard_normal((int(rng.integers(1, 9)), 8))
        worst = max(worst, check_kernel_smoother_identity(x, params, cfg))
    return {"suite": "smoother", "trials": trials, "max_deviation": worst, "passed": worst < 1e-12}


# ---------------------------------------------------------------------------
# 1-WL colour refinement


def wl_refinement(g: Graph, rounds: int | None = None) -> np.ndarray:
    """Stable 1-WL colours, relabelled densely in order of first occurrence."""
    n = g.num_nodes
    rounds = n if rounds is None else rounds
    palette = {}
    colors = np.array([palette.setdefault(tuple(row), len(palette)) for row in g.node_feats.tolist()], dtype=np.int64)
    for _ in range(rounds):
        palette = {}
        sigs = [(int(colors[v]), tuple(sorted(colors[g.neighbors(v)].tolist()))) for v in range(n)]
        new = np.array([palette.setdefault(s, len(palette)) for s in sigs], dtype=np.int64)
        stable = len(palette) == len(np.unique(colors))
        colors = new
        if stable:
            break
    return colors


def wl_color_multisets(*graphs: Graph, rounds: int | None = None) -> list:
    """Refine all graphs jointly (as a disjoint union) so colours are comparable;
    return each graph's sorted colour multiset."""
    union = disjoint_union(graphs)
    colors = wl_refinement(union, rounds)
    out, start = [], 0
    for gr in graphs:
        out.append(sorted(colors[start:start + gr.num_nodes].tolist()))
        start += gr.num_nodes
    return out


def wl_indistinguishable(g: Graph, g2: Graph) -> bool:
    a, b = wl_color_multisets(g, g2)
    return a == b


# ---------------------------------------------------------------------------
# permutation equivariance


def check_equivariance(g: Graph, pi, cfg: SatConfig, params: ModelParams) -> float:
    """Max |encode(permute(g)) - permute(encode(g))| over node rows (the CLS
    row compared directly), and the graph-level prediction difference."""
    pi = np.asarray(pi, dtype=np.int64)
    gp = permute_graph(g, pi)
    a, b = prepare_graph(g, cfg), prepare_graph(gp, cfg)
    xa, ta = encode(a, cfg, params)
    xb, tb = encode(b, cfg, params)
    n = g.num_nodes
    dev = float(np.abs(xb.data[pi] - xa.data[:n]).max()) if n else 0.0
    if ta.cls_index is not None:
        dev = max(dev, float(np.abs(xb.data[n] - xa.data[n]).max()))
    pa, _ = forward(a, cfg, params)
    pb, _ = forward(b, cfg, params)
    if cfg.graph_level:
        dev = max(dev, float(np.abs(pa.data - pb.data).max()))
    else:
        dev = max(dev, float(np.abs(pb.data[pi] - pa.data).max()))
    return dev


def lap_pe_unambiguous(g: Graph, m: int, gap: float = 1e-4) -> bool:
    """True when eigenvectors 1..m are unique up to sign and the sign rule has no tie."""
    if m > g.num_nodes - 1:
        return False
    w, vecs = sym_eig(normalized_laplacian(g))
    for j in range(1, m + 1):
        if w[j] - w[j - 1] < gap or (j + 1 < len(w) and w[j + 1] - w[j] < gap):
            return False
        mags = np.sort(np.abs(vecs[:, j]))
        if len(mags) > 1 and mags[-1] - mags[-2] < gap:
            return False
    return True


def random_model_config(rng, extractor, pe, readout, task="regression", edge_dim=0, hidden=8, heads=2,
                        layers=2, k=None, gnn=None) -> SatConfig:
    k = int(rng.integers(1, 3)) if k is None else k
    gnn = str(rng.choice(["gin", "gcn"])) if gnn is None else gnn
    out_dim = 1 if task == "regression" else 3
    return SatConfig(num_layers=layers, hidden_dim=hidden, num_heads=heads, k=k, extractor=extractor, gnn=gnn,
                     pe=pe, pe_dim=3, readout=readout, task=task, output_dim=out_dim, in_dim=2,
                     edge_dim=edge_dim).validate()


def random_connected_graph(rng, n, p, d=2, edge_dim=0) -> Graph:
    while True:
        edges = erdos_renyi_edges(n, p, rng)
        ef = rng.standard_normal((len(edges), edge_dim)) if edge_dim else None
        g = build_graph(n, edges, rng.standard_normal((n, d)), ef)
        from .graph import k_hop_neighborhood
        if len(k_hop_neighborhood(g, 0, n)) == n:
            return g


def run_equivariance(trials: int = 100, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    combos = [(ext, pe, ro) for ext in ("subtree", "subgraph") for pe in ("rwpe", "lappe")
              for ro in ("mean", "sum", "cls")]
    worst = 0.0
    for t in range(trials):
        ext, pe, ro = combos[t % len(combos)]
        edge_dim = int(rng.integers(0, 2)) * 2
        cfg = random_model_config(rng, ext, pe, ro, edge_dim=edge_dim)
        while True:
            g = random_connected_graph(rng, int(rng.integers(5, 10)), 0.5, edge_dim=edge_dim)
            if pe != "lappe" or lap_pe_unambiguous(g, cfg.pe_dim):
                break
        params = init_params(cfg, int(rng.integers(1 << 31)))
        worst = max(worst, check_equivariance(g, rng.permutation(g.num_nodes), cfg, params))
    return {"suite": "equivariance", "trials": trials, "max_deviation": worst, "passed": worst < 1e-9}


# ---------------------------------------------------------------------------
# gradient check of the whole model


def perturb_params(params: ModelParams, rng, std=0.1):
    """Redraw every parameter from N(0, std); norm gains from N(1, std)."""
    for name, t in params.items():
        base = 1.0 if name.endswith(".g") else 0.0
        t.data[...] = base + std * rng.standard_normal(t.shape)


def model_grad_check(g: Graph, cfg: SatConfig, seed: int = 0, eps: float = 1e-6, target=None) -> float:
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    perturb_params(params, rng)
    gp = prepare_graph(g, cfg)
    if target is None:
        target = 0.5 if cfg.task == "regression" else (1 if cfg.task == "graph-class" else rng.integers(0, cfg.output_dim, g.num_nodes))
    kind = "l1" if cfg.task == "regression" else "cross-entropy"

    def f(p):
        pred, _ = forward(gp, cfg, p)
        return loss(pred, target, kind)

    return grad_check(f, params, eps)


def gradcheck_configs():
    out = []
    for ext in ("subtree", "subgraph"):
        for gnn in ("gin", "gcn"):
            for edge_dim in (0, 2):
                out.append(dict(extractor=ext, gnn=gnn, edge_dim=edge_dim))
    return out


def run_gradcheck(graphs: int = 5, seed: int = 0, hidden: int = 4, heads: int = 2) -> dict:
    rng = np.random.default_rng(seed)
    worst, rows = 0.0, []
    for gi in range(graphs):
        for spec in gradcheck_configs():
            cfg = SatConfig(num_layers=2, hidden_dim=hidden, num_heads=heads, k=2, extractor=spec["extractor"],
                            gnn=spec["gnn"], pe="rwpe", pe_dim=2, readout="cls", task="graph-class",
                            output_dim=2, in_dim=2, edge_dim=spec["edge_dim"]).validate()
            g = random_connected_graph(rng, 6, 0.5, edge_dim=spec["edge_dim"])
            err = model_grad_check(g, cfg, seed=int(rng.integers(1 << 31)))
            rows.append({"graph": gi, **spec, "max_rel_error": float(err)})
            worst = max(worst, err)
    return {"suite": "gradcheck", "checks": rows, "max_rel_error": float(worst), "passed": bool(worst < 1e-4)}


SUITES = {
    "theorem1": lambda seed, trials: run_theorem1(trials, seed),
    "theorem2": lambda seed, trials: run_theorem2(20, seed),
    "smoother": lambda seed, trials: run_smoother(min(trials, 100), seed),
    "equivariance": lambda seed, trials: run_equivariance(min(trials, 100), seed),
    "gradcheck": lambda seed, trials: run_gradcheck(5, seed),
}


def run_suite(name: str, seed: int = 0, trials: int = 200) -> dict:
    if name == "all":
        reports = [SUITES[k](seed, trials) for k in SUITES]
        return {"suite": "all", "reports": reports, "passed": all(r["passed"] for r in reports)}
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}")
    return SUITES[name](seed, trials)
