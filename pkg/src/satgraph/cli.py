"""Command-line interface: ``satgraph {gen,train,eval,dump-attention,verify}``.

Results go to stdout (or files), logs to stderr.  Exit codes: 0 success,
1 domain failure, 2 invalid flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import datasets as ds
from .graph import GraphError
from .model import ConfigError, SatConfig, forward, prepare_graph
from .posenc import EigenError
from .train import (
    CheckpointError, TrainConfig, TrainingError, default_loss, evaluate, load_checkpoint, save_checkpoint, train,
)
from .verify import PreconditionError, run_suite

log = logging.getLogger("satgraph")

DOMAIN_ERRORS = (OSError, ds.SchemaError, CheckpointError, ConfigError, TrainingError, GraphError, EigenError,
                 PreconditionError, FloatingPointError)


class UsageError(Exception):
    """Bad flag values detected after argparse (mapped to exit code 2)."""


# ---------------------------------------------------------------------------
# config handling


def _coerce(value: str, current, name: str):
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    kind = type(current)
    if kind is bool:
        if isinstance(parsed, bool):
            return parsed
    elif kind is int:
        if isinstance(parsed, int) and not isinstance(parsed, bool):
            return parsed
    elif kind is float:
        if isinstance(parsed, (int, float)) and not isinstance(parsed, bool):
            return float(parsed)
    elif kind is str:
        return value
    raise UsageError(f"--set {name}={value}: expected a {kind.__name__}")


def apply_overrides(sections: dict, overrides) -> None:
    """Apply ``key=value`` overrides in place.  Keys are ``model.x``/``train.x``
    or a bare field name, which must belong to exactly one section."""
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        if "." in key:
            section, _, name = key.partition(".")
            if section not in sections or name not in sections[section]:
                raise UsageError(f"unknown config key {key!r}")
        else:
            owners = [s for s, d in sections.items() if key in d]
            if len(owners) != 1:
                raise UsageError(f"unknown config key {key!r}" if not owners else f"ambiguous config key {key!r}")
            section, name = owners[0], key
        sections[section][name] = _coerce(value, sections[section][name], key)


def resolve_configs(config_path, overrides, dataset: ds.Dataset):
    raw = {}
    if config_path:
        with open(config_path, encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict) or set(raw) - {"model", "train"}:
            raise ConfigError("config file must be an object with optional 'model' and 'train' sections")
    model = SatConfig().to_dict()
    # data-dependent defaults, overridable by the file or --set
    model.update(task=dataset.task, in_dim=dataset.feat_dim, edge_dim=dataset.edge_dim,
                 output_dim=dataset.num_classes,
                 readout="none" if dataset.task == "node-class" else "mean")
    tr = TrainConfig(loss=default_loss(dataset.task)).to_dict()
    try:
        model.update(raw.get("model") or {})
        tr.update(raw.get("train") or {})
        sections = {"model": model, "train": tr}
        apply_overrides(sections, overrides)
        cfg = SatConfig.from_dict(model).validate()
        tcfg = TrainConfig.from_dict(tr).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, tcfg


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    if args.kind == "cycle-vs-triangles":
        data = ds.gen_cycle_vs_triangles(args.n, args.seed)
    elif args.kind == "triangle-count":
        data = ds.gen_triangle_count_regression(args.n, args.nodes, args.edge_prob, args.seed)
    else:
        data = ds.gen_sbm_node_classification(args.n, args.blocks, args.p_in, args.p_out, args.seed)
    ds.save_jsonl(data, args.out)
    log.info("wrote %d graphs to %s", len(data), args.out)
    return 0


def _with_split(data, seed, stratify):
    if len(data) < 3:
        return data
    return ds.split(data, seed=seed, stratify=stratify and data.task == "graph-class")


def cmd_train(args) -> int:
    data = ds.load_jsonl(args.data)
    cfg, tcfg = resolve_configs(args.config, args.set, data)
    data = _with_split(data, tcfg.seed, args.stratify)
    log.info("training on %d graphs (%d validation)", len(data.indices("train")), len(data.indices("val")))
    params, hist = train(data, cfg, tcfg)
    save_checkpoint(params, cfg, args.out, tcfg)
    history_path = args.history or f"{args.out}.history.json"
    with open(history_path, "w", encoding="utf-8") as fh:
        json.dump({"config": {"model": cfg.to_dict(), "train": tcfg.to_dict()}, "data": args.data,
                   "history": hist.to_dict()}, fh, indent=1)
    log.info("checkpoint %s, history %s, best epoch %d", args.out, history_path, hist.best_epoch)
    return 0


def _load_model(path):
    params, cfg, tcfg = load_checkpoint(path, with_train_config=True)
    return params, cfg, tcfg


def cmd_eval(args) -> int:
    params, cfg, tcfg = _load_model(args.checkpoint)
    data = ds.load_jsonl(args.data)
    if args.split != "all":
        seed = tcfg.seed if tcfg is not None else 0
        data = _with_split(data, seed, args.stratify)
        samples = data.subset(args.split)
    else:
        samples = data.samples
    metrics = evaluate(samples, params, cfg)
    metrics["split"] = args.split
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_dump_attention(args) -> int:
    params, cfg, _ = _load_model(args.checkpoint)
    data = ds.load_jsonl(args.data)
    if not 0 <= args.graph_index < len(data):
        raise UsageError(f"--graph-index {args.graph_index} out of range for {len(data)} graphs")
    g = prepare_graph(data.samples[args.graph_index].graph, cfg)
    pred, trace = forward(g, cfg, params)
    labels = list(range(g.num_nodes)) + (["cls"] if trace.cls_index is not None else [])
    out = {"graph_index": args.graph_index, "readout": cfg.readout, "prediction": np.asarray(pred.data).tolist(),
           **trace.to_json_dict(labels)}
    text = json.dumps(out, indent=1)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def cmd_verify(args) -> int:
    report = run_suite(args.suite, args.seed, args.trials)
    print(json.dumps(report, indent=1, sort_keys=True))
    if not report["passed"]:
        log.error("verification suite %s failed", args.suite)
        return 1
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="satgraph", description="Structure-aware graph transformer toolkit.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic JSONL corpus")
    g.add_argument("kind", choices=sorted(ds.GENERATORS))
    g.add_argument("--n", type=int, default=200, help="number of graphs")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--nodes", type=int, default=12, help="nodes per graph (triangle-count)")
    g.add_argument("--edge-prob", type=float, default=0.3, help="edge probability (triangle-count)")
    g.add_argument("--blocks", type=int, nargs="+", default=[5, 5], help="block sizes (sbm)")
    g.add_argument("--p-in", type=float, default=0.6)
    g.add_argument("--p-out", type=float, default=0.05)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help='JSON file {"model": {...}, "train": {...}}')
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--history", help="history JSON path (default: <out>.history.json)")
    t.add_argument("--set", nargs="+", action="extend", default=[], metavar="KEY=VALUE",
                   help="config override, e.g. k=3 or train.base_lr=5e-4 (repeatable)")
    t.add_argument("--stratify", action="store_true", help="class-stratified split")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint; metrics JSON on stdout")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("all", "train", "val", "test"), default="all",
                   help="evaluate on a split drawn with the checkpoint's training seed")
    e.add_argument("--stratify", action="store_true")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("dump-attention", help="write the attention trace of one graph as JSON")
    d.add_argument("--data", required=True)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--graph-index", type=int, default=0)
    d.add_argument("--out")
    d.set_defaults(func=cmd_dump_attention)

    v = sub.add_parser("verify", help="run property suites; exit 1 if any check fails")
    v.add_argument("--suite", choices=("theorem1", "theorem2", "smoother", "equivariance", "gradcheck", "all"),
                   default="all")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--trials", type=int, default=200)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        level=logging.WARNING - 10 * min(args.verbose, 2))
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"satgraph: error: {exc}", file=sys.stderr)
        return 2
    except DOMAIN_ERRORS as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
