"""A small reverse-mode autodiff engine over dense float64 numpy arrays.

Operations record themselves on the innermost active :class:`Tape` whenever one
of their inputs requires a gradient; outside a tape they are plain numpy
evaluations.  Typical use::

    with Tape() as tape:
        loss = model_loss(params)
    tape.backward(loss)       # or backward(loss)

Only row-vector bias broadcasting is supported; every other primitive
requires exact shape agreement.
"""

from __future__ import annotations

import threading

import numpy as np

from . import _kernels

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


_local = threading.local()


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "_node")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        return Tensor(np.full(like.shape, float(x)))
    return Tensor(x)


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


class Tape:
    """Ordered record of primitive applications, consumed by one backward pass."""

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, parents, backward_fn):
        out.requires_grad = True
        out._tape = self
        out._node = len(self.nodes)
        self.nodes.append((out, parents, backward_fn))

    def backward(self, loss: Tensor):
        if self.consumed:
            raise TapeError("backward called on a consumed tape")
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not recorded on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        for idx in range(loss._node, -1, -1):
            out, parents, fn = self.nodes[idx]
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, gp in zip(parents, fn(g)):
                if gp is None or not p.requires_grad:
                    continue
                if p._node is None or p._tape is not self:
                    p.grad = gp.copy() if p.grad is None else p.grad + gp
                else:
                    key = id(p)
                    prev = grads.get(key)
                    grads[key] = gp if prev is None else prev + gp
        self.consumed = True
        self.nodes = []


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if loss._tape is None:
        raise TapeError("loss is not on a tape")
    loss._tape.backward(loss)


def _finish(out_data, parents, backward_fn):
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, parents, backward_fn)
    return out


def _need2d(*ts):
    for t in ts:
        if t.ndim != 2:
            raise ShapeError(f"expected a 2-d tensor, got shape {t.shape}")


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _need2d(a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _finish(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def _bias_grad(g, shape):
    if g.shape == shape:
        return g
    return g.sum(axis=0).reshape(shape)


def _check_broadcast(a, b, name):
    if a.shape == b.shape:
        return
    ok = a.ndim == 2 and (b.shape == (a.shape[1],) or b.shape == (1, a.shape[1]))
    if not ok:
        raise ShapeError(f"{name} shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a row vector added to every row of ``a``."""
    _check_broadcast(a, b, "add")
    bs = b.shape
    return _finish(a.data + b.data, (a, b), lambda g: (g, _bias_grad(g, bs)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    bs = b.shape
    return _finish(a.data - b.data, (a, b), lambda g: (g, -_bias_grad(g, bs)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _finish(a.data * c, (a,), lambda g: (g * c,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _finish(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale_rows(a: Tensor, coeff) -> Tensor:
    """Multiply row ``i`` by the constant ``coeff[i]``."""
    _need2d(a)
    c = np.asarray(coeff, dtype=np.float64).reshape(-1, 1)
    if c.shape[0] != a.shape[0]:
        raise ShapeError(f"scale_rows: {c.shape[0]} coefficients for {a.shape[0]} rows")
    return _finish(a.data * c, (a,), lambda g: (g * c,))


def transpose(a: Tensor) -> Tensor:
    _need2d(a)
    return _finish(a.data.T.copy(), (a,), lambda g: (g.T,))


def concat(ts, axis: int = 0) -> Tensor:
    ts = list(ts)
    if axis not in (0, 1):
        raise ShapeError(f"invalid concat axis {axis}")
    _need2d(*ts)
    other = 1 - axis
    if len({t.shape[other] for t in ts}) != 1:
        raise ShapeError(f"concat axis {axis}: incompatible shapes {[t.shape for t in ts]}")
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _finish(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bw)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    _need2d(a)
    if not 0 <= start <= stop <= a.shape[1]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for {a.shape[1]} columns")
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _finish(a.data[:, start:stop].copy(), (a,), bw)


def row_gather(a: Tensor, indices) -> Tensor:
    _need2d(a)
    idx = np.asarray(indices, dtype=np.int64)
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"row index out of range for {n} rows")
    return _finish(a.data[idx], (a,), lambda g: (_kernels.segment_sum(g, idx, n),))


def segment_sum(a: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Sum the rows of ``a`` into ``num_segments`` buckets given by ``segment_ids``."""
    _need2d(a)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape != (a.shape[0],):
        raise ShapeError(f"{ids.shape[0]} segment ids for {a.shape[0]} rows")
    if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
        raise ShapeError(f"segment id out of range for {num_segments} segments")
    out = _kernels.segment_sum(np.ascontiguousarray(a.data), ids, int(num_segments))
    return _finish(out, (a,), lambda g: (g[ids],))


def softmax_rows(a: Tensor) -> Tensor:
    _need2d(a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _finish(y, (a,), bw)


# ---------------------------------------------------------------------------
# pair-list attention: scores are kept only for listed (row, col) node pairs,
# with the pairs of each row stored contiguously (``indptr`` as in CSR).


def _heads(x, num_heads):
    return x.reshape(x.shape[0], num_heads, -1)


def pair_scores(q: Tensor, k: Tensor, rows, cols, num_heads: int) -> Tensor:
    """``s[p, h] = <q[rows[p]], k[cols[p]]>`` restricted to head ``h``'s columns."""
    _need2d(q, k)
    if q.shape[1] != k.shape[1] or q.shape[1] % num_heads:
        raise ShapeError(f"pair_scores: widths {q.shape[1]}, {k.shape[1]} for {num_heads} heads")
    qr = _heads(q.data[rows], num_heads)
    kc = _heads(k.data[cols], num_heads)
    nq, nk = q.shape[0], k.shape[0]

    def bw(g):
        g3 = g[:, :, None]
        gq = (g3 * kc).reshape(len(rows), -1)
        gk = (g3 * qr).reshape(len(cols), -1)
        return _kernels.segment_sum(gq, rows, nq), _kernels.segment_sum(gk, cols, nk)

    return _finish(np.einsum("phd,phd->ph", qr, kc), (q, k), bw)


def segment_softmax(s: Tensor, indptr) -> Tensor:
    """Softmax of each column of ``s`` within the contiguous row ranges
    ``indptr[i]:indptr[i + 1]`` (every range must be non-empty)."""
    _need2d(s)
    indptr = np.asarray(indptr, dtype=np.int64)
    if indptr[-1] != s.shape[0] or np.any(np.diff(indptr) < 1):
        raise ShapeError("segment_softmax needs non-empty segments covering every row")
    if s.shape[0] == 0:
        return _finish(s.data.copy(), (s,), lambda g: (g,))
    starts = indptr[:-1]
    counts = np.diff(indptr)
    m = np.repeat(np.maximum.reduceat(s.data, starts, axis=0), counts, axis=0)
    e = np.exp(s.data - m)
    y = e / np.repeat(np.add.reduceat(e, starts, axis=0), counts, axis=0)

    def bw(g):
        inner = np.repeat(np.add.reduceat(g * y, starts, axis=0), counts, axis=0)
        return (y * (g - inner),)

    return _finish(y, (s,), bw)


def pair_aggregate(w: Tensor, v: Tensor, rows, cols, num_rows: int) -> Tensor:
    """``out[i, head h] = sum over pairs p with rows[p] = i of w[p, h] v[cols[p], head h]``."""
    _need2d(w, v)
    nh = w.shape[1]
    if v.shape[1] % nh:
        raise ShapeError(f"pair_aggregate: width {v.shape[1]} not divisible into {nh} heads")
    vc = _heads(v.data[cols], nh)
    wd = w.data
    nv = v.shape[0]
    contrib = (wd[:, :, None] * vc).reshape(len(rows), -1)

    def bw(g):
        gr = _heads(g[rows], nh)
        gw = np.einsum("phd,phd->ph", gr, vc)
        gv = (wd[:, :, None] * gr).reshape(len(cols), -1)
        return gw, _kernels.segment_sum(gv, cols, nv)

    return _finish(_kernels.segment_sum(contrib, rows, num_rows), (w, v), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _finish(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def abs_(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return _finish(np.abs(a.data), (a,), lambda g: (g * s,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _finish(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / max(a.data.size, 1))


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Row-wise normalization to zero mean / unit variance, then ``gain * x + bias``."""
    _need2d(a)
    d = a.shape[1]
    if gain.data.size != d or bias.data.size != d:
        raise ShapeError(f"layer_norm gain/bias must have {d} entries")
    x = a.data
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data.reshape(1, d)
    gshape, bshape = gain.shape, bias.shape

    def bw(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0).reshape(gshape), g.sum(axis=0).reshape(bshape)

    return _finish(xhat * gd + bias.data.reshape(1, d), (a, gain, bias), bw)


class DropoutStream:
    """Counter-based mask source: call ``i`` of a stream seeded ``s`` always
    yields the same mask, independent of any other randomness."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.counter = 0

    def keep_mask(self, shape, rate: float):
        bitgen = np.random.Philox(key=self.seed, counter=[0, 0, 0, self.counter])
        self.counter += 1
        return np.random.Generator(bitgen).random(shape) >= rate


def dropout(a: Tensor, rate: float, train: bool, stream: DropoutStream | None = None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return a
    if stream is None:
        raise ValueError("training-mode dropout needs a DropoutStream")
    m = stream.keep_mask(a.shape, rate) / (1.0 - rate)
    return _finish(a.data * m, (a,), lambda g: (g * m,))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-softmax ``logits``."""
    _need2d(logits)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if t.shape[0] != n:
        raise ShapeError(f"{t.shape[0]} targets for {n} rows")
    if t.size and (t.min() < 0 or t.max() >= c):
        raise ValueError(f"class index out of range for {c} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    rows = np.arange(n)
    val = -logp[rows, t].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        return (p * (float(g) / n),)

    return _finish(np.array(val), (logits,), bw)


# ---------------------------------------------------------------------------
# parameters and gradient checking


class ModelParams(dict):
    """Named trainable tensors.  Iteration order is insertion order."""

    def zero_grad(self):
        for t in self.values():
            t.grad = None

    def num_scalars(self) -> int:
        return sum(t.data.size for t in self.values())

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.items()})

    def arrays(self) -> dict:
        return {k: v.data for k, v in self.items()}


def grad_check(f, params, eps: float = 1e-6) -> float:
    """Max relative error between backward() and central differences.

    ``f(params)`` must return a scalar Tensor and be deterministic.  The error
    for one coordinate is ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if isinstance(params, Tensor):
        params = {"p": params}
    for t in params.values():
        t.grad = None
        t.requires_grad = True
    with Tape() as tape:
        loss = f(params)
    if loss.requires_grad:
        tape.backward(loss)
    worst = 0.0
    for t in params.values():
        g_ad = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = f(params).item()
            flat[i] = old - eps
            fm = f(params).item()
            flat[i] = old
            g_fd = (fp - fm) / (2 * eps)
            ga = g_ad.reshape(-1)[i]
            if not (np.isfinite(g_fd) and np.isfinite(ga)):
                raise FloatingPointError(f"non-finite gradient at coordinate {i}")
            err = abs(ga - g_fd) / max(1.0, abs(ga), abs(g_fd))
            worst = max(worst, err)
    return worst
