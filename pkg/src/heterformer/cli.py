"""Command-line entry point: the full pipeline behind one executable.

Subcommands: generate, vocab, warmup, train, eval, embed, retrieve,
benchmark.  Flag values override config-file values, which override
defaults; the fully resolved configuration is echoed into the output
directory so any result can be rerun from its artifacts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import bench, evaluate, synth
from .graph import load_graph, load_schema, split_edges, sample_neighbors
from .model import Heterformer, HeterformerConfig, ModelParams
from .text import Vocabulary, build_vocab
from .train import (TrainConfig, OptimizerState, _derive_seed, checkpoint_digest,
                    config_digest, evaluate_prec, fit, load_checkpoint, run_warmup,
                    save_checkpoint)

DEFAULT_FRACTIONS = (0.7, 0.1, 0.2)


def _log(msg):
    print(msg, flush=True)


def _build_parser():
    parser = argparse.ArgumentParser(prog="heterformer")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--schema")
    common.add_argument("--nodes")
    common.add_argument("--edges")
    common.add_argument("--config", help="JSON config file; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="out")
    common.add_argument("--ckpt")
    common.add_argument("--vocab-file")
    common.add_argument("--vocab-size", type=int)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--test-batch-size", type=int)
    common.add_argument("--dim", type=int)
    common.add_argument("--heads", type=int)
    common.add_argument("--layers", type=int)
    common.add_argument("--seq-len", type=int)
    common.add_argument("--textless-dim", type=int)
    common.add_argument("--learning-rate", type=float)
    common.add_argument("--max-epochs", type=int)
    common.add_argument("--patience", type=int)
    common.add_argument("--clip-norm", type=float)
    common.add_argument("--lr-warmup-steps", type=int)
    common.add_argument("--warmup-epochs", type=int)
    common.add_argument("--no-warmup", action="store_true", default=None)
    common.add_argument("--ablation", choices=["full", "no_agg", "no_tr", "no_tl"])
    common.add_argument("--arch", choices=["nested", "cascaded"])
    common.add_argument("--budgets", help="edge-type budgets, e.g. doc-doc=5,tag-doc=1")
    common.add_argument("--query-edge-type")
    common.add_argument("--labels")

    p = sub.add_parser("generate", parents=[common], help="write a synthetic network")
    p.add_argument("--topics", type=int, default=4)
    p.add_argument("--docs", type=int, default=2000)
    p.add_argument("--p-in", type=float, default=0.01)
    p.add_argument("--p-out", type=float, default=0.001)
    p.add_argument("--beta", type=float, default=0.9)

    sub.add_parser("vocab", parents=[common], help="build the vocabulary file")
    sub.add_parser("warmup", parents=[common], help="warm up textless embeddings")
    sub.add_parser("train", parents=[common], help="fit the model")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--probe", action="store_true")
    p.add_argument("--cluster", action="store_true")

    sub.add_parser("embed", parents=[common], help="export all node embeddings")

    p = sub.add_parser("retrieve", parents=[common], help="query-based retrieval")
    p.add_argument("--query", required=True)
    p.add_argument("-k", type=int, default=10)

    p = sub.add_parser("benchmark", parents=[common], help="per-layer timing grid")
    p.add_argument("--bench-p", type=int, default=32)
    p.add_argument("--bench-m", type=int, default=5)
    p.add_argument("--bench-n", default="16,32,64,128,256")
    p.add_argument("--repeats", type=int, default=5)
    return parser


def _parse_budgets(text):
    budgets = {}
    for part in text.split(","):
        if not part:
            continue
        name, _, count = part.partition("=")
        budgets[name] = int(count)
    return budgets


class RunConfig:
    """Merged view: CLI flags over config file over defaults."""

    def __init__(self, args):
        file_cfg = {}
        if args.config:
            with open(args.config, encoding="utf-8") as fh:
                file_cfg = json.load(fh)

        def pick(flag, key, default):
            if getattr(args, flag, None) is not None:
                return getattr(args, flag)
            return file_cfg.get(key, default)

        seed = pick("seed", "seed", None)
        if seed is None:
            seed = int(os.environ.get("HETERFORMER_SEED", "0"))
        self.seed = int(seed)
        self.schema = pick("schema", "schema", None)
        self.nodes = pick("nodes", "nodes", None)
        self.edges = pick("edges", "edges", None)
        self.labels = pick("labels", "labels", None)
        self.out = args.out
        self.ckpt = pick("ckpt", "ckpt", None)
        self.vocab_file = pick("vocab_file", "vocab_file", None)
        self.vocab_size = pick("vocab_size", "vocab_size", 2000)
        self.query_edge_type = pick("query_edge_type", "query_edge_type", synth.DOC_EDGE)
        budgets = pick("budgets", "budgets", None)
        if isinstance(budgets, str):
            budgets = _parse_budgets(budgets)
        self.budgets = budgets
        self.no_warmup = bool(pick("no_warmup", "no_warmup", False))
        self.model = HeterformerConfig(
            dim=pick("dim", "dim", 64),
            heads=pick("heads", "heads", 4),
            layers=pick("layers", "layers", 2),
            seq_len=pick("seq_len", "seq_len", 32),
            textless_dim=pick("textless_dim", "textless_dim", 64),
            budgets=budgets or {},
            ablation=pick("ablation", "ablation", "full"),
            arch=pick("arch", "arch", "nested"),
        )
        self.train = TrainConfig(
            learning_rate=pick("learning_rate", "learning_rate", 1e-5),
            batch_size=pick("batch_size", "batch_size", 30),
            dev_batch_size=pick("test_batch_size", "test_batch_size", 50),
            max_epochs=pick("max_epochs", "max_epochs", 30),
            patience=pick("patience", "patience", 3),
            clip_norm=pick("clip_norm", "clip_norm", 0.0),
            lr_warmup_steps=pick("lr_warmup_steps", "lr_warmup_steps", 0),
            warmup_epochs=pick("warmup_epochs", "warmup_epochs", 5),
            seed=self.seed,
        )

    def echo(self, path):
        doc = {
            "seed": self.seed, "schema": self.schema, "nodes": self.nodes,
            "edges": self.edges, "labels": self.labels, "ckpt": self.ckpt,
            "vocab_file": self.vocab_file, "vocab_size": self.vocab_size,
            "query_edge_type": self.query_edge_type, "no_warmup": self.no_warmup,
            "model": asdict(self.model), "train": asdict(self.train),
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _require(cfg, *fields):
    for f in fields:
        if getattr(cfg, f) is None:
            raise SystemExit(f"error: --{f.replace('_', '-')} is required for this command")


def _load_model(cfg):
    _require(cfg, "schema", "nodes", "edges")
    schema = load_schema(cfg.schema)
    g = load_graph(cfg.nodes, cfg.edges, schema)
    if cfg.vocab_file and os.path.exists(cfg.vocab_file):
        vocab = Vocabulary.load(cfg.vocab_file, cfg.model.seq_len)
    else:
        vocab = build_vocab(g, cfg.vocab_size, max_len=cfg.model.seq_len)
    if not cfg.model.budgets:
        budget = {}
        for et in schema.edge_types:
            budget[et.name] = 5 if et.name == cfg.query_edge_type else 2
        cfg.model.budgets = budget
    type_nodes = {t: g.nodes_of_type(t) for t in schema.textless_types()}
    params = ModelParams(schema, len(vocab), type_nodes, cfg.model, cfg.seed)
    return Heterformer(g, vocab, params, cfg.model)


def _all_node_embeddings(model):
    """Embeddings for every node: text-rich via nested encoding, textless
    via the layer-1 projection of their low-dimensional embeddings."""
    g = model.graph
    ids, rows = [], []
    for type_name in g.schema.text_rich_types():
        nodes = g.nodes_of_type(type_name)
        for lo in range(0, len(nodes), 64):
            chunk = nodes[lo:lo + 64]
            samples = [sample_neighbors(g, n, model.cfg.budgets, _derive_seed("embed", n))
                       for n in chunk]
            embs = model.encode_batch(samples).data
            ids.extend(chunk)
            rows.extend(embs)
    for type_name in g.schema.textless_types():
        for n in g.nodes_of_type(type_name):
            ids.append(n)
            rows.append(model.textless_embedding(n).data)
    return ids, np.array(rows)


def _write_metrics(path, values):
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(values):
            fh.write(f"{key} {values[key]!r}\n")


# ---------------------------------------------------------------------------
# Commands


def _cmd_generate(args, cfg):
    scfg = synth.SynthConfig(topics=args.topics, text_rich_count=args.docs,
                             p_in=args.p_in, p_out=args.p_out, beta=args.beta,
                             seed=cfg.seed)
    g, labels = synth.generate(scfg)
    from .graph import write_graph, write_schema
    write_schema(g.schema, os.path.join(cfg.out, "schema.txt"))
    write_graph(g, os.path.join(cfg.out, "nodes.tsv"), os.path.join(cfg.out, "edges.tsv"))
    synth.write_labels(labels, os.path.join(cfg.out, "labels.tsv"))
    _log(f"wrote synthetic network with {len(g.node_type)} nodes, "
         f"{len(g.edges)} edges to {cfg.out}")


def _cmd_vocab(args, cfg):
    _require(cfg, "schema", "nodes", "edges")
    g = load_graph(cfg.nodes, cfg.edges, load_schema(cfg.schema))
    vocab = build_vocab(g, cfg.vocab_size, max_len=cfg.model.seq_len)
    path = os.path.join(cfg.out, "vocab.txt")
    vocab.save(path)
    _log(f"wrote {len(vocab)} tokens to {path}")


def _cmd_warmup(args, cfg):
    model = _load_model(cfg)
    run_warmup(model, cfg.train, log=_log)
    path = os.path.join(cfg.out, "warmup.ckpt")
    save_checkpoint(path, model.params, OptimizerState(), 0, 0.0,
                    config_digest(cfg.model, cfg.train))
    _log(f"wrote warmed checkpoint to {path}")


def _split_pairs(model, cfg):
    return split_edges(model.graph, cfg.query_edge_type, DEFAULT_FRACTIONS, cfg.seed)


def _cmd_train(args, cfg):
    model = _load_model(cfg)
    if cfg.ckpt:
        load_checkpoint(cfg.ckpt, model.params,
                        config_digest(cfg.model, cfg.train), log=_log)
    elif not cfg.no_warmup:
        run_warmup(model, cfg.train, log=_log)
    train, dev, _ = _split_pairs(model, cfg)
    result = fit(model, train, dev, cfg.train, log=_log)
    trace_path = os.path.join(cfg.out, "trace.csv")
    with open(trace_path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,dev_prec\n")
        for epoch, loss, prec in result.trace:
            fh.write(f"{epoch},{loss!r},{prec!r}\n")
    ckpt_path = os.path.join(cfg.out, "model.ckpt")
    save_checkpoint(ckpt_path, model.params, OptimizerState(), result.best_epoch,
                    result.best_dev_prec, config_digest(cfg.model, cfg.train))
    _log(f"best dev prec {result.best_dev_prec:.5f} at epoch {result.best_epoch}")
    _log(f"wrote {ckpt_path} (sha256 {checkpoint_digest(ckpt_path)}) and {trace_path}")


def _cmd_eval(args, cfg):
    model = _load_model(cfg)
    _require(cfg, "ckpt")
    load_checkpoint(cfg.ckpt, model.params, config_digest(cfg.model, cfg.train), log=_log)
    _, _, test = _split_pairs(model, cfg)
    ablation = cfg.model.ablation
    values = evaluate_prec(model, test, cfg.train.dev_batch_size, cfg.seed,
                           ablation=ablation)
    if args.probe or args.cluster:
        _require(cfg, "labels")
        labels = synth.load_labels(cfg.labels)
        ids, embs = _all_node_embeddings(model)
        keep = [i for i, n in enumerate(ids) if n in labels
                and model.graph.is_text_rich(n)]
        x = embs[keep]
        y = np.array([labels[ids[i]] for i in keep])
        if args.probe:
            rng = np.random.default_rng(cfg.seed)
            order = rng.permutation(len(y))
            n_tr, n_dev = round(len(y) * 0.7), round(len(y) * 0.1)
            tr, dv, te = np.split(order, [n_tr, n_tr + n_dev])
            probe = evaluate.linear_probe(
                (x[tr], y[tr]), (x[dv], y[dv]), (x[te], y[te]),
                evaluate.ProbeConfig(seed=cfg.seed), log=_log)
            values["probe_prec"] = probe["prec"]
            values["probe_ndcg"] = probe["ndcg"]
        if args.cluster:
            pred = evaluate.kmeans(x, k=len(set(y.tolist())), seed=cfg.seed)
            values.update(evaluate.cluster_metrics(pred, y))
    _write_metrics(os.path.join(cfg.out, "metrics.txt"), values)
    for key in sorted(values):
        _log(f"{key} {values[key]:.5f}")


def _cmd_embed(args, cfg):
    model = _load_model(cfg)
    if cfg.ckpt:
        load_checkpoint(cfg.ckpt, model.params, config_digest(cfg.model, cfg.train), log=_log)
    ids, embs = _all_node_embeddings(model)
    path = os.path.join(cfg.out, "embeddings.tsv")
    evaluate.write_embeddings(path, ids, embs)
    _log(f"wrote {len(ids)} embeddings to {path}")


def _cmd_retrieve(args, cfg):
    model = _load_model(cfg)
    if cfg.ckpt:
        load_checkpoint(cfg.ckpt, model.params, config_digest(cfg.model, cfg.train), log=_log)
    ids, embs = _all_node_embeddings(model)
    keep = [i for i, n in enumerate(ids) if model.graph.is_text_rich(n)]
    hits = evaluate.retrieve(args.query, [ids[i] for i in keep], embs[keep],
                             model, args.k, log=_log)
    for nid, score in hits:
        _log(f"{score:.5f}\t{nid}\t{model.graph.text[nid]}")


def _cmd_benchmark(args, cfg):
    n_values = [int(v) for v in args.bench_n.split(",")]
    rows = bench.run_benchmark(p=args.bench_p, m=args.bench_m, n_values=n_values,
                               dim=cfg.model.dim, repeats=args.repeats, seed=cfg.seed)
    path = os.path.join(cfg.out, "bench.csv")
    bench.write_csv(rows, path)
    for variant in ("nested", "cascaded", "concat"):
        _log(f"{variant}: log-log slope vs N = {bench.fitted_slope(rows, variant):.3f}")
    _log(f"wrote {path}")


def main(argv=None):
    args = _build_parser().parse_args(argv)
    cfg = RunConfig(args)
    os.makedirs(cfg.out, exist_ok=True)
    cfg.echo(os.path.join(cfg.out, "resolved_config.json"))
    commands = {
        "generate": _cmd_generate,
        "vocab": _cmd_vocab,
        "warmup": _cmd_warmup,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "embed": _cmd_embed,
        "retrieve": _cmd_retrieve,
        "benchmark": _cmd_benchmark,
    }
    try:
        commands[args.command](args, cfg)
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
