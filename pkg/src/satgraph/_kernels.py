"""Hot inner loops, compiled with numba when available.

Each kernel has a pure-numpy twin with the same signature and the same
summation order.  Set ``SATGRAPH_NO_NUMBA=1`` to force the numpy path (or run
without numba installed).  Both implementations stay importable as
``*_numba`` / ``*_numpy`` so tests and the benchmark can compare them.
"""

import itertools
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

USE_NUMBA = numba is not None and os.environ.get("SATGRAPH_NO_NUMBA", "0") not in ("1", "true", "yes")


def _njit(fn):
    if numba is None:  # pragma: no cover
        return fn
    return numba.njit(cache=True)(fn)


# ---------------------------------------------------------------------------
# segment sum: out[ids[i]] += values[i]


def segment_sum_numpy(values, ids, num_segments):
    out = np.zeros((num_segments, values.shape[1]), dtype=np.float64)
    np.add.at(out, ids, values)
    return out


@_njit
def segment_sum_numba(values, ids, num_segments):
    out = np.zeros((num_segments, values.shape[1]), dtype=np.float64)
    for i in range(values.shape[0]):
        s = ids[i]
        for j in range(values.shape[1]):
            out[s, j] += values[i, j]
    return out


# ---------------------------------------------------------------------------
# k-hop ball by BFS over a CSR adjacency; returns sorted node ids


def khop_ball_numpy(indptr, indices, u, k, num_nodes):
    seen = np.zeros(num_nodes, dtype=np.bool_)
    seen[u] = True
    frontier = np.array([u], dtype=np.int64)
    for _ in range(k):
        if frontier.size == 0:
            break
        nbrs = np.concatenate([indices[indptr[v]:indptr[v + 1]] for v in frontier])
        nbrs = np.unique(nbrs)
        frontier = nbrs[~seen[nbrs]]
        seen[frontier] = True
    return np.flatnonzero(seen).astype(np.int64)


@_njit
def khop_ball_numba(indptr, indices, u, k, num_nodes):
    seen = np.zeros(num_nodes, dtype=np.bool_)
    seen[u] = True
    frontier = np.empty(num_nodes, dtype=np.int64)
    nxt = np.empty(num_nodes, dtype=np.int64)
    frontier[0] = u
    fsize = 1
    for _ in range(k):
        nsize = 0
        for a in range(fsize):
            v = frontier[a]
            for p in range(indptr[v], indptr[v + 1]):
                w = indices[p]
                if not seen[w]:
                    seen[w] = True
                    nxt[nsize] = w
                    nsize += 1
        if nsize == 0:
            break
        frontier, nxt = nxt, frontier
        fsize = nsize
    return np.flatnonzero(seen).astype(np.int64)


# ---------------------------------------------------------------------------
# cyclic Jacobi eigenvalue iteration for dense symmetric matrices


def _rotation(app, aqq, apq):
    theta = (aqq - app) / (2.0 * apq)
    if theta >= 0.0:
        t = 1.0 / (theta + np.sqrt(1.0 + theta * theta))
    else:
        t = -1.0 / (-theta + np.sqrt(1.0 + theta * theta))
    c = 1.0 / np.sqrt(1.0 + t * t)
    return c, t * c


def jacobi_numpy(a, tol, max_sweeps):
    a = a.copy()
    n = a.shape[0]
    v = np.eye(n)
    for sweep in range(max_sweeps + 1):
        off = np.abs(a - np.diag(np.diag(a))).max() if n > 1 else 0.0
        if off < tol:
            return np.diag(a).copy(), v, sweep
        if sweep == max_sweeps:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0.0:
                    continue
                c, s = _rotation(a[p, p], a[q, q], a[p, q])
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    return np.diag(a).copy(), v, -1


@_njit
def jacobi_numba(a, tol, max_sweeps):
    a = a.copy()
    n = a.shape[0]
    v = np.eye(n)
    for sweep in range(max_sweeps + 1):
        off = 0.0
        for i in range(n):
            for j in range(n):
                if i != j and abs(a[i, j]) > off:
                    off = abs(a[i, j])
        if off < tol:
            return np.diag(a).copy(), v, sweep
        if sweep == max_sweeps:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta >= 0.0:
                    t = 1.0 / (theta + np.sqrt(1.0 + theta * theta))
                else:
                    t = -1.0 / (-theta + np.sqrt(1.0 + theta * theta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                for i in range(n):
                    x = a[i, p]
                    y = a[i, q]
                    a[i, p] = c * x - s * y
                    a[i, q] = s * x + c * y
                for i in range(n):
                    x = a[p, i]
                    y = a[q, i]
                    a[p, i] = c * x - s * y
                    a[q, i] = s * x + c * y
                for i in range(n):
                    x = v[i, p]
                    y = v[i, q]
                    v[i, p] = c * x - s * y
                    v[i, q] = s * x + c * y
    return np.diag(a).copy(), v, -1


# ---------------------------------------------------------------------------
# bottleneck assignment: min over permutations of max dist[w, pi(w)]


def bottleneck_numpy(dist):
    n = dist.shape[0]
    if n == 0:
        return 0.0
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    return float(dist[np.arange(n), perms].max(axis=1).min())


@_njit
def bottleneck_numba(dist):
    # Heap's algorithm, iterative
    n = dist.shape[0]
    if n == 0:
        return 0.0
    perm = np.arange(n)
    c = np.zeros(n, dtype=np.int64)
    best = 0.0
    for w in range(n):
        if dist[w, perm[w]] > best:
            best = dist[w, perm[w]]
    i = 0
    while i < n:
        if c[i] < i:
            if i % 2 == 0:
                perm[0], perm[i] = perm[i], perm[0]
            else:
                perm[c[i]], perm[i] = perm[i], perm[c[i]]
            cur = 0.0
            for w in range(n):
                d = dist[w, perm[w]]
                if d > cur:
                    cur = d
                    if cur >= best:
                        break
            if cur < best:
                best = cur
            c[i] += 1
            i = 0
        else:
            c[i] = 0
            i += 1
    return best


# ---------------------------------------------------------------------------
# triangle count of a dense 0/1 adjacency


def triangles_numpy(adj):
    a = adj.astype(np.int64)
    return int(np.trace(a @ a @ a) // 6)


@_njit
def triangles_numba(adj):
    n = adj.shape[0]
    count = 0
    for i in range(n):
        for j in range(i + 1, n):
            if adj[i, j]:
                for k in range(j + 1, n):
                    if adj[i, k] and adj[j, k]:
                        count += 1
    return count


# ---------------------------------------------------------------------------
# random-walk return probabilities diag((A D^-1)^t), t = 1..p.  Column j of
# ``prob`` is the walk distribution started at node j; each node sums its
# incoming terms in ascending value order, so relabelling the graph permutes
# the result without changing a single bit.


def rw_return_numpy(indptr, indices, deg, p):
    n = len(deg)
    inv = np.where(deg > 0, 1.0 / np.maximum(deg, 1), 0.0)
    prob = np.eye(n)
    out = np.zeros((n, p))
    for t in range(p):
        scaled = prob * inv[:, None]
        nxt = np.zeros((n, n))
        for u in range(n):
            nb = indices[indptr[u]:indptr[u + 1]]
            if len(nb):
                terms = np.sort(scaled[nb], axis=0)
                acc = terms[0].copy()
                for r in range(1, len(nb)):
                    acc += terms[r]
                nxt[u] = acc
        prob = nxt
        out[:, t] = np.diag(prob)
    return out


@_njit
def rw_return_numba(indptr, indices, deg, p):
    n = len(deg)
    inv = np.zeros(n)
    for v in range(n):
        if deg[v] > 0:
            inv[v] = 1.0 / deg[v]
    prob = np.eye(n)
    out = np.zeros((n, p))
    buf = np.empty(n)
    for t in range(p):
        nxt = np.zeros((n, n))
        for u in range(n):
            lo, hi = indptr[u], indptr[u + 1]
            if hi == lo:
                continue
            for j in range(n):
                # insertion sort into buf; degrees are small
                m = 0
                for q in range(lo, hi):
                    w = indices[q]
                    val = prob[w, j] * inv[w]
                    r = m
                    while r > 0 and buf[r - 1] > val:
                        buf[r] = buf[r - 1]
                        r -= 1
                    buf[r] = val
                    m += 1
                acc = buf[0]
                for r in range(1, m):
                    acc += buf[r]
                nxt[u, j] = acc
        prob = nxt
        for v in range(n):
            out[v, t] = prob[v, v]
    return out


if USE_NUMBA:
    segment_sum = segment_sum_numba
    khop_ball = khop_ball_numba
    jacobi = jacobi_numba
    bottleneck = bottleneck_numba
    triangles = triangles_numba
    rw_return = rw_return_numba
else:
    segment_sum = segment_sum_numpy
    khop_ball = khop_ball_numpy
    jacobi = jacobi_numpy
    bottleneck = bottleneck_numpy
    triangles = triangles_numpy
    rw_return = rw_return_numpy
