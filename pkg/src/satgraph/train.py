"""Losses, AdamW, learning-rate schedules, the training loop, metrics and
checkpoint files."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import DropoutStream, ModelParams, Tape, Tensor
from .model import SatConfig, forward_batch, init_params, make_batch, prepare_graph, split_predictions

log = logging.getLogger(__name__)

SCHEDULES = ("transformer-inv-sqrt", "cosine")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    base_lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 2000
    warmup_steps: int = 5000
    weight_decay: float = 1e-5
    schedule: str = "transformer-inv-sqrt"
    seed: int = 0
    loss: str = "l1"  # "l1" | "cross-entropy"

    def validate(self) -> "TrainConfig":
        if self.base_lr < 0 or self.batch_size < 1 or self.epochs < 1 or self.warmup_steps < 1 or self.weight_decay < 0:
            raise ValueError("base_lr, weight_decay >= 0 and batch_size, epochs, warmup_steps >= 1 required")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.loss not in ("l1", "cross-entropy"):
            raise ValueError(f"unknown loss {self.loss!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_metric: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    metric_name: str = ""
    best_epoch: int = -1

    def __len__(self):
        return len(self.train_loss)

    def deterministic_part(self) -> dict:
        """Everything except wall-clock timings."""
        return {"train_loss": self.train_loss, "val_metric": self.val_metric, "lr": self.lr,
                "metric_name": self.metric_name, "best_epoch": self.best_epoch}

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# losses and metrics


def loss(pred: Tensor, target, kind: str) -> Tensor:
    if kind == "l1":
        t = np.asarray(target, dtype=np.float64).reshape(pred.shape)
        return ad.mean_all(ad.abs_(ad.sub(pred, Tensor(t))))
    if kind == "cross-entropy":
        return ad.cross_entropy(pred, np.atleast_1d(np.asarray(target)))
    raise ValueError(f"unknown loss {kind!r}")


def default_loss(task: str) -> str:
    return "l1" if task == "regression" else "cross-entropy"


# ---------------------------------------------------------------------------
# optimizer and schedules


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state: AdamWState, lr, weight_decay, betas=(0.9, 0.999), eps=1e-8):
    """One in-place AdamW update with decoupled weight decay.

    ``params`` maps names to Tensors (or arrays); ``grads`` maps the same names
    to gradient arrays, missing/None meaning zero.
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        theta = p.data if isinstance(p, Tensor) else p
        g = grads.get(name)
        g = np.zeros_like(theta) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {theta.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        if m.shape != theta.shape:
            raise ValueError(f"optimizer state shape mismatch for {name}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        theta -= lr * ((m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * theta)


def lr_at(step: int, cfg: TrainConfig, total_steps: int | None = None) -> float:
    """Learning rate at 1-based optimizer step ``step``."""
    w = cfg.warmup_steps
    if cfg.schedule == "transformer-inv-sqrt":
        return cfg.base_lr * min(step / w, math.sqrt(w / step))
    if step <= w:
        return cfg.base_lr * step / w
    total = total_steps if total_steps is not None else w
    progress = min(1.0, (step - w) / max(1, total - w))
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# training and evaluation


def _stream_seed(seed, epoch, pos):
    return int(np.random.SeedSequence([seed, epoch, pos]).generate_state(1, np.uint64)[0])


def batch_targets(samples, task):
    if task == "node-class":
        return np.concatenate([np.asarray(s.target, dtype=np.int64) for s in samples])
    if task == "graph-class":
        return np.array([int(s.target) for s in samples], dtype=np.int64)
    return np.array([s.target for s in samples], dtype=np.float64).reshape(len(samples), -1)


def train(dataset, cfg: SatConfig, tcfg: TrainConfig, params: ModelParams | None = None):
    """Mini-batch training; each mini-batch is one disjoint-union forward pass
    whose loss is the mean over its graphs (over its nodes for node tasks).

    Returns the parameters with the best validation metric and the history.
    """
    cfg.validate()
    tcfg.validate()
    train_idx = dataset.indices("train")
    val_idx = dataset.indices("val")
    if len(train_idx) == 0:
        raise TrainingError("empty training split")
    graphs = {int(i): prepare_graph(dataset.samples[i].graph, cfg) for i in np.concatenate([train_idx, val_idx])}
    val_samples = [dataset.samples[i] for i in val_idx]
    val_batches = _eval_batches([graphs[int(i)] for i in val_idx], cfg)
    params = init_params(cfg, tcfg.seed) if params is None else params
    state = AdamWState()
    hist = TrainHistory(metric_name=metric_name(cfg.task))
    lower_better = cfg.task == "regression"
    best, best_val = None, None
    steps_per_epoch = -(-len(train_idx) // tcfg.batch_size)
    total_steps = steps_per_epoch * tcfg.epochs
    step = 0
    for epoch in range(tcfg.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([tcfg.seed, epoch]).permutation(train_idx)
        epoch_loss = 0.0
        lr = 0.0
        for start in range(0, len(order), tcfg.batch_size):
            chosen = order[start:start + tcfg.batch_size]
            batch = make_batch([graphs[int(i)] for i in chosen], cfg)
            targets = batch_targets([dataset.samples[i] for i in chosen], cfg.task)
            params.zero_grad()
            stream = DropoutStream(_stream_seed(tcfg.seed, epoch, start))
            with Tape() as tape:
                pred, _ = forward_batch(batch, cfg, params, train=True, stream=stream)
                l = loss(pred, targets, tcfg.loss)
            val = l.item()
            if not math.isfinite(val):
                raise TrainingError(f"non-finite loss {val} at epoch {epoch}, step {step}")
            epoch_loss += val * len(chosen)
            tape.backward(l)
            step += 1
            lr = lr_at(step, tcfg, total_steps)
            adamw_step(params, {k: p.grad for k, p in params.items()}, state, lr, tcfg.weight_decay)
        params.zero_grad()
        if len(val_idx):
            metric = evaluate(val_samples, params, cfg, batches=val_batches)[hist.metric_name]
        else:
            metric = epoch_loss / len(order)
        hist.train_loss.append(epoch_loss / len(order))
        hist.val_metric.append(metric)
        hist.lr.append(lr)
        hist.wall_time.append(time.perf_counter() - t0)
        improved = best_val is None or (metric < best_val if lower_better else metric > best_val)
        if improved:
            best_val, best, hist.best_epoch = metric, params.copy(), epoch
        log.debug("epoch %d loss %.6f %s %.6f lr %.2e", epoch, hist.train_loss[-1], hist.metric_name, metric, lr)
    return best, hist


EVAL_BATCH = 64


def _eval_batches(graphs, cfg):
    return [make_batch(graphs[i:i + EVAL_BATCH], cfg) for i in range(0, len(graphs), EVAL_BATCH)]


def metric_name(task: str) -> str:
    return "mae" if task == "regression" else "accuracy"


def predict(samples, params, cfg: SatConfig, batches=None):
    """Per-sample prediction arrays (``(1, out)`` per graph, ``(n, out)`` for node tasks)."""
    if batches is None:
        batches = _eval_batches([prepare_graph(s.graph, cfg) for s in samples], cfg)
    out = []
    for b in batches:
        pred, _ = forward_batch(b, cfg, params)
        out.extend(split_predictions(pred.data, b, cfg))
    return out


def evaluate(samples, params, cfg: SatConfig, batches=None) -> dict:
    """MAE for regression, accuracy for classification (argmax, first index on
    ties) and per-class accuracy for node tasks."""
    if hasattr(samples, "samples"):
        samples = samples.samples
    samples = list(samples)
    if not samples:
        raise ValueError("no samples to evaluate")
    preds = predict(samples, params, cfg, batches)
    if cfg.task == "regression":
        errs = [abs(float(p.reshape(-1)[0]) - float(s.target)) for p, s in zip(preds, samples)]
        return {"mae": float(np.mean(errs)), "count": len(errs)}
    if cfg.task == "graph-class":
        hits = [int(np.argmax(p.reshape(-1))) == int(s.target) for p, s in zip(preds, samples)]
        return {"accuracy": float(np.mean(hits)), "count": len(hits)}
    if cfg.task == "node-class":
        ys = np.concatenate([np.asarray(s.target, dtype=np.int64) for s in samples])
        yhat = np.concatenate([np.argmax(p, axis=1) for p in preds])
        per_class = {int(c): float(np.mean(yhat[ys == c] == c)) for c in np.unique(ys)}
        return {"accuracy": float(np.mean(yhat == ys)), "per_class_accuracy": per_class, "count": int(len(ys))}
    raise ValueError(f"unknown task {cfg.task!r}")


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little-endian): b"SATCKPT" | u32 version | u64 len | config JSON |
# u32 count | count x (u32 len | name | u32 ndim | ndim x u64 | f64 payload)

MAGIC = b"SATCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(params: ModelParams, cfg: SatConfig, path, train_cfg: TrainConfig | None = None):
    blob = _canonical_json({"model": cfg.to_dict(), "train": None if train_cfg is None else train_cfg.to_dict()})
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(blob)), blob,
             struct.pack("<I", len(params))]
    for name, t in params.items():
        nb = name.encode()
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        parts.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, with_train_config=False):
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf)
    if len(buf) < len(MAGIC):
        raise TruncatedCheckpointError("file shorter than the magic header")
    if r.take(len(MAGIC)) != MAGIC:
        raise BadMagicError(f"{path}: not a SAT checkpoint")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    (blen,) = r.unpack("<Q")
    meta = json.loads(r.take(blen).decode())
    cfg = SatConfig.from_dict(meta["model"])
    (count,) = r.unpack("<I")
    params = ModelParams()
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        params[name] = Tensor(data, requires_grad=True)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after the last tensor")
    if with_train_config:
        tc = meta.get("train")
        return params, cfg, None if tc is None else TrainConfig.from_dict(tc)
    return params, cfg
