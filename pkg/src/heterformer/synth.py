"""Synthetic heterogeneous text-rich networks with planted topic structure.

One text-rich hub type ("doc") carries documents drawn from topic-specific
word distributions; doc-doc edges follow a planted partition; several
textless satellite types attach to docs mostly within their own topic.
Both channels carry topic signal so that aggregation ablations and the
warm-up phase have something to gain or lose at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import EdgeType, HeteroGraph, NodeTypeSchema

TEXT_RICH_TYPE = "doc"
DOC_EDGE = "doc-doc"


@dataclass
class SynthConfig:
    topics: int = 4
    text_rich_count: int = 2000
    textless_counts: dict = field(default_factory=lambda: {"creator": 200, "venue": 200, "tag": 200})
    vocab_size: int = 500
    words_per_doc: int = 20
    concentration: float = 0.1     # symmetric Dirichlet over topic-word weights
    p_in: float = 0.01
    p_out: float = 0.001
    beta: float = 0.9              # probability a textless node's edge stays in-topic
    textless_degree: int = 10      # mean doc attachments per textless node
    seed: int = 0

    def __post_init__(self):
        if self.topics < 2:
            raise ValueError("need at least 2 topics")
        if not self.p_in > self.p_out:
            raise ValueError("p_in must exceed p_out")
        if not 0.5 < self.beta <= 1.0:
            raise ValueError("beta must lie in (0.5, 1]")


def make_schema(cfg):
    node_types = [(TEXT_RICH_TYPE, True)] + [(t, False) for t in sorted(cfg.textless_counts)]
    edge_types = [EdgeType(DOC_EDGE, TEXT_RICH_TYPE, TEXT_RICH_TYPE)] + [
        EdgeType(f"{t}-doc", t, TEXT_RICH_TYPE) for t in sorted(cfg.textless_counts)
    ]
    return NodeTypeSchema(tuple(node_types), tuple(edge_types))


def default_budgets(cfg):
    """Per-edge-type neighbor sampling budgets for the generated schema."""
    budgets = {DOC_EDGE: 5}
    for i, t in enumerate(sorted(cfg.textless_counts)):
        budgets[f"{t}-doc"] = (3, 2, 1)[i % 3]
    return budgets


def _planted_partition_edges(topic_of, p_in, p_out, rng):
    """Sample undirected edges with block-dependent probabilities."""
    topics = np.asarray(topic_of)
    n = len(topics)
    edges = []
    blocks = {}
    for i, t in enumerate(topics):
        blocks.setdefault(int(t), []).append(i)
    labels = sorted(blocks)
    for ai, a in enumerate(labels):
        for b in labels[ai:]:
            na, nb = len(blocks[a]), len(blocks[b])
            if a == b:
                n_pairs = na * (na - 1) // 2
                p = p_in
            else:
                n_pairs = na * nb
                p = p_out
            count = rng.binomial(n_pairs, p)
            if count == 0:
                continue
            chosen = rng.choice(n_pairs, size=count, replace=False)
            aa, bb = np.array(blocks[a]), np.array(blocks[b])
            if a == b:
                # unrank the flat index into an (i < j) pair
                rows = (np.floor((1 + np.sqrt(8 * chosen + 1)) / 2)).astype(int)
                cols = chosen - rows * (rows - 1) // 2
                edges.extend((aa[c], aa[r]) for r, c in zip(rows, cols))
            else:
                edges.extend((aa[c // nb], bb[c % nb]) for c in chosen)
    return edges


def generate(cfg):
    """Build the graph and its ground-truth topic labels.

    Deterministic given ``cfg.seed``.  Returns (HeteroGraph, labels dict).
    """
    rng = np.random.default_rng(cfg.seed)
    schema = make_schema(cfg)
    g = HeteroGraph(schema)
    labels = {}

    words = [f"w{i:04d}" for i in range(cfg.vocab_size)]
    topic_words = rng.dirichlet(
        np.full(cfg.vocab_size, cfg.concentration), size=cfg.topics)

    n = cfg.text_rich_count
    doc_ids = [f"d{i:05d}" for i in range(n)]
    doc_topic = np.array([i * cfg.topics // n for i in range(n)])
    for i, doc in enumerate(doc_ids):
        t = int(doc_topic[i])
        toks = rng.choice(cfg.vocab_size, size=cfg.words_per_doc, p=topic_words[t])
        g.add_node(doc, TEXT_RICH_TYPE, " ".join(words[j] for j in toks))
        labels[doc] = t

    for i, j in _planted_partition_edges(doc_topic, cfg.p_in, cfg.p_out, rng):
        g.add_edge(doc_ids[i], doc_ids[j], DOC_EDGE)

    docs_by_topic = [np.flatnonzero(doc_topic == t) for t in range(cfg.topics)]
    for type_name in sorted(cfg.textless_counts):
        count = cfg.textless_counts[type_name]
        for i in range(count):
            nid = f"{type_name}{i:04d}"
            topic = i * cfg.topics // count
            g.add_node(nid, type_name)
            labels[nid] = topic
            degree = max(1, rng.poisson(cfg.textless_degree))
            for _ in range(degree):
                if rng.random() < cfg.beta:
                    t = topic
                else:
                    t = int(rng.choice([x for x in range(cfg.topics) if x != topic]))
                doc = doc_ids[int(rng.choice(docs_by_topic[t]))]
                g.add_edge(nid, doc, f"{type_name}-doc")
    return g, labels


def write_labels(labels, path):
    with open(path, "w", encoding="utf-8") as fh:
        for nid in sorted(labels):
            fh.write(f"{nid}\t{labels[nid]}\n")


def load_labels(path):
    labels = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line:
                nid, topic = line.split("\t")
                labels[nid] = int(topic)
    return labels
