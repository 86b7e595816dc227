"""Link-prediction training with in-batch negatives, warm-up, checkpoints.

The model is trained as a siamese encoder: both endpoints of a positive
edge are encoded with the same parameters, and every other key in the
batch serves as a negative.  Textless embeddings can be warmed up first
against a frozen text-only encoder.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .graph import sample_neighbors
from .tensor import ContractError, Tape, Tensor

CHECKPOINT_MAGIC = b"HTFCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Corrupt or incompatible checkpoint file."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 1e-3
    adam_eps: float = 1e-8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    clip_norm: float = 0.0     # 0 disables gradient clipping
    lr_warmup_steps: int = 0   # linear ramp of the learning rate; 0 disables
    batch_size: int = 30
    patience: int = 3
    max_epochs: int = 30
    warmup_epochs: int = 5
    warmup_learning_rate: float = 1e-2
    dev_batch_size: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ContractError("in-batch negatives need batch size >= 2")


def link_loss(query_embs, key_embs):
    """Mean in-batch contrastive loss; key i is the positive of query i."""
    if query_embs.data.shape != key_embs.data.shape:
        raise T.ShapeError(
            f"query/key shapes differ: {query_embs.data.shape} vs {key_embs.data.shape}")
    scores = T.matmul(query_embs, T.transpose_last(key_embs))
    return T.in_batch_cross_entropy(scores)


# ---------------------------------------------------------------------------
# Optimizer


class OptimizerState:
    """Per-parameter Adam moment estimates plus the shared step counter."""

    def __init__(self):
        self.m = {}
        self.v = {}
        self.step = 0


def _decay_exempt(name):
    # Decoupled weight decay skips normalization parameters, biases, and the
    # low-dimensional textless embeddings.
    return (
        "ln1" in name or "ln2" in name or name.endswith("_b")
        or ".mlp_b1" in name or ".mlp_b2" in name or name.endswith(".z")
    )


def clip_gradients(named_params, max_norm):
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for _, p in named_params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    # a non-finite norm is left for the optimizer's per-parameter check
    if math.isfinite(norm) and norm > max_norm:
        scale = max_norm / norm
        for _, p in named_params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def adam_step(named_params, state, cfg):
    """One Adam update with bias correction and decoupled weight decay."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    lr = cfg.learning_rate
    if cfg.lr_warmup_steps and t <= cfg.lr_warmup_steps:
        lr *= t / cfg.lr_warmup_steps
    if cfg.clip_norm:
        clip_gradients(named_params, cfg.clip_norm)
    for name, p in named_params:
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.data -= lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
        if cfg.weight_decay and not _decay_exempt(name):
            p.data -= lr * cfg.weight_decay * p.data


# ---------------------------------------------------------------------------
# Batch assembly


def _derive_seed(*parts):
    h = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(h[:8], "little")


def _sample_for(model, node, seed):
    return sample_neighbors(model.graph, node, model.cfg.budgets, seed)


def positive_pairs(graph, train_edges, epoch, seed):
    """One positive (anchor, neighbor) pair per anchor node per epoch."""
    adj = {}
    for s, d in train_edges:
        adj.setdefault(s, []).append(d)
        adj.setdefault(d, []).append(s)
    rng = np.random.default_rng(_derive_seed("pairs", seed, epoch))
    pairs = []
    for anchor in sorted(adj):
        nbrs = sorted(adj[anchor])
        pairs.append((anchor, nbrs[int(rng.integers(len(nbrs)))]))
    rng.shuffle(pairs)
    return pairs


def encode_pairs(model, pairs, seed, ablation=None):
    """Encode both endpoints of each pair; returns (queries, keys) tensors."""
    samples = []
    for i, (q, k) in enumerate(pairs):
        samples.append(_sample_for(model, q, _derive_seed("q", seed, i)))
        samples.append(_sample_for(model, k, _derive_seed("k", seed, i)))
    embs = model.encode_batch(samples, ablation=ablation)
    n = len(pairs)
    idx = np.arange(2 * n)
    queries = T.index_rows(embs, idx[0::2])
    keys = T.index_rows(embs, idx[1::2])
    return queries, keys


# ---------------------------------------------------------------------------
# Warm-up


def warmup_loss(frozen_text_embs, textless_embs):
    """In-batch contrastive loss of textless queries against frozen keys."""
    return link_loss(textless_embs, frozen_text_embs)


def run_warmup(model, cfg, log=None):
    """Train only the textless embeddings and type projections.

    Keys are text-only encodings of one sampled text-rich neighbor per
    textless node, produced with all text-side parameters frozen (encoded
    off-tape, so gradients cannot reach them).  Textless nodes without any
    text-rich neighbor are skipped; their count is reported.
    """
    graph = model.graph
    schema = graph.schema
    pairs = []        # (textless id, neighbor text-rich id candidates)
    skipped = 0
    for type_name in schema.textless_types():
        for nid in graph.nodes_of_type(type_name):
            nbrs = []
            for et in schema.edge_types:
                if schema.neighbor_type(type_name, et.name) in schema.text_rich_types():
                    nbrs.extend(graph.neighbors(nid, et.name))
            if nbrs:
                pairs.append((nid, sorted(set(nbrs))))
            else:
                skipped += 1
    if skipped and log:
        log(f"warmup: skipped {skipped} textless nodes with no text-rich neighbor")

    textless_named = list(model.params.textless.named())
    state = OptimizerState()
    wcfg = TrainConfig(
        learning_rate=cfg.warmup_learning_rate, weight_decay=0.0,
        batch_size=cfg.batch_size, seed=cfg.seed)
    frozen_cache = {}

    def frozen_embedding_rows(node_ids):
        missing = [n for n in node_ids if n not in frozen_cache]
        if missing:
            embs = model.encode_texts([graph.text[n] for n in missing])
            for j, n in enumerate(missing):
                frozen_cache[n] = embs.data[j]
        return Tensor(np.array([frozen_cache[n] for n in node_ids]))

    losses = []
    for epoch in range(cfg.warmup_epochs):
        rng = np.random.default_rng(_derive_seed("warmup", cfg.seed, epoch))
        order = rng.permutation(len(pairs))
        total, batches = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            chunk = order[lo:lo + cfg.batch_size]
            if len(chunk) < 2:
                continue
            keys = frozen_embedding_rows(
                [pairs[i][1][int(rng.integers(len(pairs[i][1])))] for i in chunk])
            with Tape() as tape:
                queries = T.concat(
                    [T.reshape(model.textless_embedding(pairs[i][0]), (1, -1)) for i in chunk],
                    axis=0)
                loss = warmup_loss(keys, queries)
            T.zero_grads([t for _, t in textless_named])
            T.backward(loss, tape)
            adam_step(textless_named, state, wcfg)
            total += loss.item()
            batches += 1
        losses.append(total / max(batches, 1))
        if log:
            log(f"warmup epoch {epoch + 1}: loss {losses[-1]:.5f}")
    return losses


# ---------------------------------------------------------------------------
# Fitting


def evaluate_prec(model, pairs, batch_size, seed, ablation=None):
    """In-batch PREC/MRR/NDCG over fixed-size batches of positive pairs."""
    from .evaluate import RankingResult, metrics, rank_in_batch

    rng = np.random.default_rng(_derive_seed("eval-order", seed))
    order = rng.permutation(len(pairs))
    ranks = []
    for lo in range(0, len(order), batch_size):
        chunk = [pairs[i] for i in order[lo:lo + batch_size]]
        if len(chunk) < 2:
            continue
        q, k = encode_pairs(model, chunk, _derive_seed("eval", seed, lo), ablation=ablation)
        ranks.extend(rank_in_batch(q.data, k.data).ranks)
    if not ranks:
        raise ContractError("no full evaluation batches")
    return metrics(RankingResult(ranks=ranks, batch_size=batch_size))


@dataclass
class FitResult:
    best_params: dict            # name -> ndarray snapshot
    trace: list                  # (epoch, train loss, dev PREC)
    best_dev_prec: float
    best_epoch: int


def fit(model, train_edges, dev_pairs, cfg, log=None):
    """Minimize the link loss; early-stop on dev PREC; return the best state.

    Deterministic given the config seed: identical runs produce identical
    traces and parameters.
    """
    if not train_edges:
        raise ContractError("empty train split")
    named = list(model.params.named_parameters())
    tensors = [t for _, t in named]
    state = OptimizerState()
    best = None
    trace = []
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        pairs = positive_pairs(model.graph, train_edges, epoch, cfg.seed)
        total, batches = 0.0, 0
        for lo in range(0, len(pairs), cfg.batch_size):
            chunk = pairs[lo:lo + cfg.batch_size]
            if len(chunk) < 2:
                continue
            with Tape() as tape:
                q, k = encode_pairs(model, chunk, _derive_seed("train", cfg.seed, epoch, lo))
                loss = link_loss(q, k)
            T.zero_grads(tensors)
            T.backward(loss, tape)
            adam_step(named, state, cfg)
            total += loss.item()
            batches += 1
        dev = evaluate_prec(model, dev_pairs, cfg.dev_batch_size, cfg.seed)
        trace.append((epoch, total / max(batches, 1), dev["prec"]))
        if log:
            log(f"epoch {epoch}: loss {trace[-1][1]:.5f} dev prec {dev['prec']:.5f}")
        if best is None or dev["prec"] > best[1]:
            best = (epoch, dev["prec"], {n: t.data.copy() for n, t in named})
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    for name, t in named:
        t.data[...] = best[2][name]
    return FitResult(best_params=best[2], trace=trace,
                     best_dev_prec=best[1], best_epoch=best[0])


# ---------------------------------------------------------------------------
# Checkpoints


def config_digest(model_cfg, train_cfg):
    blob = json.dumps({"model": asdict(model_cfg), "train": asdict(train_cfg)},
                      sort_keys=True).encode()
    return hashlib.sha256(blob).digest()


def _write_blob(fh, name, arr):
    name_b = name.encode()
    fh.write(struct.pack("<H", len(name_b)))
    fh.write(name_b)
    fh.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(arr.astype("<f8").tobytes())


def _read_exact(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint file")
    return data


def _read_blob(fh):
    (nlen,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, nlen).decode()
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(_read_exact(fh, count * 8), dtype="<f8").reshape(shape).copy()
    return name, arr


def save_checkpoint(path, params, opt_state, epoch, best_dev_prec, digest):
    """Binary, versioned, bit-exact round trip."""
    named = list(params.named_parameters())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(digest)
        fh.write(struct.pack("<I", epoch))
        fh.write(struct.pack("<d", best_dev_prec))
        blobs = [(n, t.data) for n, t in named]
        blobs += [(f"opt.m.{n}", a) for n, a in sorted(opt_state.m.items())]
        blobs += [(f"opt.v.{n}", a) for n, a in sorted(opt_state.v.items())]
        blobs.append(("opt.step", np.array(float(opt_state.step))))
        fh.write(struct.pack("<I", len(blobs)))
        for name, arr in blobs:
            _write_blob(fh, name, arr)


def load_checkpoint(path, params, expected_digest=None, log=None):
    """Restore parameters in place; returns (opt_state, epoch, best_dev_prec)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        digest = _read_exact(fh, 32)
        (epoch,) = struct.unpack("<I", _read_exact(fh, 4))
        (best_dev_prec,) = struct.unpack("<d", _read_exact(fh, 8))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        blobs = dict(_read_blob(fh) for _ in range(count))
    if expected_digest is not None and digest != expected_digest:
        msg = f"{path}: checkpoint config digest does not match the current config"
        if log:
            log("warning: " + msg)
        else:
            raise CheckpointError(msg)
    opt_state = OptimizerState()
    for name, t in params.named_parameters():
        if name not in blobs:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        if blobs[name].shape != t.data.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name!r}")
        t.data[...] = blobs[name]
        if f"opt.m.{name}" in blobs:
            opt_state.m[name] = blobs[f"opt.m.{name}"]
            opt_state.v[name] = blobs[f"opt.v.{name}"]
    opt_state.step = int(blobs.get("opt.step", np.array(0.0)))
    return opt_state, epoch, best_dev_prec


def checkpoint_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
