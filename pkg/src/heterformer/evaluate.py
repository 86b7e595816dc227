"""Ranking metrics, probe classification, clustering, and retrieval.

All metric computations are pure functions over plain numpy arrays so they
can be checked directly against brute-force oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tape, Tensor


@dataclass
class RankingResult:
    """1-based rank of each query's true key within its candidate batch."""

    ranks: list
    batch_size: int


def rank_in_batch(query_embs, key_embs):
    """Rank each diagonal key among all keys by descending dot product.

    Ties are ranked pessimistically: the true key is placed after every
    competitor with an equal score.
    """
    q = np.asarray(query_embs)
    k = np.asarray(key_embs)
    if q.shape != k.shape:
        raise ContractError(f"query/key shapes differ: {q.shape} vs {k.shape}")
    n = q.shape[0]
    if n < 2:
        raise ContractError("ranking needs at least 2 candidates")
    scores = q @ k.T
    diag = np.diagonal(scores)
    better = (scores > diag[:, None]).sum(axis=1)
    equal = (scores == diag[:, None]).sum(axis=1) - 1  # excluding the key itself
    ranks = (1 + better + equal).tolist()
    return RankingResult(ranks=ranks, batch_size=n)


def metrics(result):
    """PREC / MRR / NDCG with a single relevant item per query."""
    ranks = np.asarray(result.ranks, dtype=float)
    return {
        "prec": float((ranks == 1).mean()),
        "mrr": float((1.0 / ranks).mean()),
        "ndcg": float((1.0 / np.log2(1.0 + ranks)).mean()),
    }


# ---------------------------------------------------------------------------
# Probe classification


@dataclass
class ProbeConfig:
    hidden: int = 200
    hidden_layers: int = 2     # two hidden stacks = three weight layers
    learning_rate: float = 1e-2
    patience: int = 25
    max_epochs: int = 300
    seed: int = 0


def _label_ranks(scores, labels):
    """Pessimistic rank of the true label in each row's score ordering."""
    true = scores[np.arange(len(labels)), labels]
    better = (scores > true[:, None]).sum(axis=1)
    equal = (scores == true[:, None]).sum(axis=1) - 1
    return 1 + better + equal


def linear_probe(train, dev, test, cfg=None, log=None):
    """Train an MLP on frozen embeddings; report test PREC and label NDCG.

    Each of ``train``/``dev``/``test`` is an (embeddings, labels) pair.
    """
    from .train import OptimizerState, TrainConfig, adam_step

    cfg = cfg or ProbeConfig()
    x_tr, y_tr = np.asarray(train[0]), np.asarray(train[1])
    x_dev, y_dev = np.asarray(dev[0]), np.asarray(dev[1])
    x_te, y_te = np.asarray(test[0]), np.asarray(test[1])
    classes = int(max(y_tr.max(), y_dev.max(), y_te.max())) + 1
    missing = sorted(set(range(classes)) - set(y_tr.tolist()))
    if missing and log:
        log(f"warning: labels absent from the probe train set: {missing}")

    rng = np.random.default_rng(cfg.seed)
    dims = [x_tr.shape[1]] + [cfg.hidden] * cfg.hidden_layers + [classes]
    weights, biases = [], []
    for din, dout in zip(dims[:-1], dims[1:]):
        weights.append(T.param(rng.normal(0.0, math.sqrt(1.0 / din), (din, dout))))
        biases.append(T.param(np.zeros(dout)))
    named = [(f"w{i}", w) for i, w in enumerate(weights)]
    named += [(f"b{i}", b) for i, b in enumerate(biases)]
    opt = OptimizerState()
    ocfg = TrainConfig(learning_rate=cfg.learning_rate, weight_decay=0.0, seed=cfg.seed)

    def forward(x):
        h = Tensor(x)
        for i, (w, b) in enumerate(zip(weights, biases)):
            h = T.add(T.matmul(h, w), b)
            if i < len(weights) - 1:
                h = T.gelu(h)
        return h

    def xent(logits, y):
        s = logits.data
        mx = s.max(axis=-1, keepdims=True)
        e = np.exp(s - mx)
        z = e.sum(axis=-1, keepdims=True)
        lse = (np.log(z) + mx)[:, 0]
        out = Tensor((lse - s[np.arange(len(y)), y]).mean())

        def back(g):
            if logits.tracked:
                soft = e / z
                soft[np.arange(len(y)), y] -= 1.0
                logits._accumulate(g * soft / len(y))

        return T._record((logits,), out, back)

    best = None
    stale = 0
    for _ in range(cfg.max_epochs):
        with Tape() as tape:
            loss = xent(forward(x_tr), y_tr)
        T.zero_grads(weights + biases)
        T.backward(loss, tape)
        adam_step(named, opt, ocfg)
        dev_acc = float((forward(x_dev).data.argmax(axis=1) == y_dev).mean())
        if best is None or dev_acc > best[0]:
            best = (dev_acc, [w.data.copy() for w in weights], [b.data.copy() for b in biases])
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    for w, snap in zip(weights, best[1]):
        w.data[...] = snap
    for b, snap in zip(biases, best[2]):
        b.data[...] = snap
    scores = forward(x_te).data
    ranks = _label_ranks(scores, y_te)
    return {
        "prec": float((scores.argmax(axis=1) == y_te).mean()),
        "ndcg": float((1.0 / np.log2(1.0 + ranks)).mean()),
    }


# ---------------------------------------------------------------------------
# Clustering


def kmeans(embs, k, seed=0, restarts=10, max_iters=100):
    """Lloyd's algorithm with k-means++ seeding; best of ``restarts`` runs."""
    x = np.asarray(embs, dtype=float)
    n = x.shape[0]
    if n < k:
        raise ContractError(f"cannot form {k} clusters from {n} points")
    rng = np.random.default_rng(seed)
    best_assign, best_inertia = None, np.inf
    for _ in range(restarts):
        centers = _kmeanspp(x, k, rng)
        assign = None
        for _ in range(max_iters):
            d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new_assign = d2.argmin(axis=1)
            for c in range(k):
                members = x[new_assign == c]
                if len(members):
                    centers[c] = members.mean(axis=0)
                else:
                    # re-seed an empty cluster to the farthest point
                    far = d2.min(axis=1).argmax()
                    centers[c] = x[far]
                    new_assign[far] = c
            if assign is not None and (new_assign == assign).all():
                break
            assign = new_assign
        inertia = float(((x - centers[assign]) ** 2).sum())
        if inertia < best_inertia:
            best_inertia, best_assign = inertia, assign.copy()
    return best_assign.tolist()


def _kmeanspp(x, k, rng):
    n = x.shape[0]
    centers = [x[int(rng.integers(n))]]
    for _ in range(k - 1):
        d2 = np.min(
            [((x - c) ** 2).sum(axis=1) for c in centers], axis=0)
        total = d2.sum()
        if total == 0:
            centers.append(x[int(rng.integers(n))])
            continue
        centers.append(x[int(rng.choice(n, p=d2 / total))])
    return np.array(centers)


def _entropy(counts, n):
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def cluster_metrics(pred, truth):
    """NMI (arithmetic-mean normalization) and adjusted Rand index."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ContractError("label lists differ in length")
    n = len(pred)
    pu, pi = np.unique(pred, return_inverse=True)
    tu, ti = np.unique(truth, return_inverse=True)
    cont = np.zeros((len(pu), len(tu)))
    np.add.at(cont, (pi, ti), 1.0)
    a = cont.sum(axis=1)
    b = cont.sum(axis=0)

    hp = _entropy(a, n)
    ht = _entropy(b, n)
    nz = cont > 0
    mi = float((cont[nz] / n * (
        np.log(cont[nz] * n) - np.log(np.outer(a, b)[nz]))).sum())
    denom = 0.5 * (hp + ht)
    nmi = mi / denom if denom > 0 else 0.0

    def comb2(v):
        return (v * (v - 1) / 2.0).sum()

    sum_ij = comb2(cont)
    sum_a, sum_b = comb2(a), comb2(b)
    total = n * (n - 1) / 2.0
    expected = sum_a * sum_b / total
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        ari = 0.0 if sum_ij != max_index else 1.0
    else:
        ari = float((sum_ij - expected) / (max_index - expected))
    return {"nmi": float(nmi), "ari": ari}


# ---------------------------------------------------------------------------
# Retrieval


def retrieve(query_text, node_ids, node_embs, model, k, log=None):
    """Top-k nodes by inner product with the text-only query embedding.

    Stable tie-break by node id; ``k`` is clamped to the corpus size.
    """
    if k > len(node_ids):
        if log:
            log(f"warning: k={k} clamped to corpus size {len(node_ids)}")
        k = len(node_ids)
    if k <= 0:
        return []
    q = model.encode_texts([query_text]).data[0]
    scores = np.asarray(node_embs) @ q
    order = sorted(range(len(node_ids)), key=lambda i: (-scores[i], node_ids[i]))
    return [(node_ids[i], float(scores[i])) for i in order[:k]]


# ---------------------------------------------------------------------------
# Embedding export


def write_embeddings(path, ids, embs):
    embs = np.asarray(embs)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{embs.shape[0]} {embs.shape[1]}\n")
        for nid, row in zip(ids, embs):
            fh.write(nid + "\t" + " ".join(repr(float(v)) for v in row) + "\n")


def read_embeddings(path):
    with open(path, encoding="utf-8") as fh:
        n, d = map(int, fh.readline().split())
        ids, rows = [], []
        for line in fh:
            nid, rest = line.rstrip("\n").split("\t")
            ids.append(nid)
            rows.append([float(v) for v in rest.split()])
    embs = np.array(rows)
    if embs.shape != (n, d):
        raise ValueError(f"{path}: header says {(n, d)}, found {embs.shape}")
    return ids, embs
