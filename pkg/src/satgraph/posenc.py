"""Absolute positional encodings: random-walk return probabilities and
Laplacian eigenvectors, plus the Jacobi eigensolver the latter uses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .graph import Graph, build_graph

JACOBI_MAX_SWEEPS = 50


class EigenError(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class PosEncoding:
    kind: str  # "none" | "rwpe" | "lappe"
    values: np.ndarray

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def rwpe(g: Graph, p: int) -> PosEncoding:
    """Return probabilities of 1..p step random walks, i.e. diag((A D^-1)^i).

    Isolated nodes get all-zero rows.  The result is exactly permutation
    equivariant (see ``_kernels.rw_return_numpy``).
    """
    if p < 1:
        raise ValueError("rwpe needs p >= 1 steps")
    deg = g.degrees.astype(np.float64)
    return PosEncoding("rwpe", _kernels.rw_return(g.indptr, g.indices, deg, int(p)))


def sym_eig(m, symmetry_tol: float = 1e-10, max_sweeps: int = JACOBI_MAX_SWEEPS):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues ascending and
    eigenvectors as the matching columns.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if m.size and np.abs(m - m.T).max() > symmetry_tol:
        raise ValueError("matrix is not symmetric")
    m = 0.5 * (m + m.T)
    tol = 1e-12 * max(1.0, np.linalg.norm(m))
    w, v, sweeps = _kernels.jacobi(np.ascontiguousarray(m), tol, max_sweeps)
    if sweeps < 0:
        raise EigenError(f"Jacobi iteration did not converge in {max_sweeps} sweeps")
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def normalized_laplacian(g: Graph) -> np.ndarray:
    deg = g.degrees.astype(np.float64)
    d = np.divide(1.0, np.sqrt(deg), out=np.zeros(g.num_nodes), where=deg > 0)
    return np.eye(g.num_nodes) - d[:, None] * g.adjacency() * d[None, :]


def lap_pe(g: Graph, m: int) -> PosEncoding:
    """Eigenvectors 1..m (index 0 skipped) of the symmetric normalized Laplacian.

    Signs are fixed so the first entry of largest magnitude is positive.
    """
    n = g.num_nodes
    if m < 1 or m > n - 1:
        raise ValueError(f"lap_pe needs 1 <= m <= n-1 = {n - 1}, got {m}")
    _, vecs = sym_eig(normalized_laplacian(g))
    cols = vecs[:, 1:m + 1].copy()
    for j in range(m):
        i = int(np.argmax(np.abs(cols[:, j])))
        if cols[i, j] < 0:
            cols[:, j] = -cols[:, j]
    return PosEncoding("lappe", cols)


def encoding_for(g: Graph, kind: str, dim: int) -> PosEncoding:
    if kind == "none":
        return PosEncoding("none", np.zeros((g.num_nodes, 0)))
    if kind == "rwpe":
        return rwpe(g, dim)
    if kind == "lappe":
        return lap_pe(g, dim)
    raise ValueError(f"unknown positional encoding {kind!r}")


def attach_encoding(g: Graph, pe: PosEncoding) -> Graph:
    if pe.values.shape[0] != g.num_nodes:
        raise ValueError(f"encoding has {pe.values.shape[0]} rows, graph has {g.num_nodes} nodes")
    if pe.kind == "none" or pe.dim == 0:
        return g
    return build_graph(g.num_nodes, g.edges, np.hstack([g.node_feats, pe.values]), g.edge_feats)
