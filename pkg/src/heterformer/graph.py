"""Heterogeneous text-rich network data model, loading, sampling, splitting.

Nodes are typed and either text-rich (carry a document) or textless.  Edges
are typed and treated as undirected for adjacency purposes: stored once,
indexed from both endpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GraphFormatError(ValueError):
    """Malformed schema/nodes/edges input."""


@dataclass(frozen=True)
class EdgeType:
    name: str
    src_type: str
    dst_type: str


@dataclass(frozen=True)
class NodeTypeSchema:
    """Node types with text-rich flags, plus typed edge declarations."""

    node_types: tuple  # of (name, is_text_rich)
    edge_types: tuple  # of EdgeType

    def __post_init__(self):
        names = [n for n, _ in self.node_types]
        if len(set(names)) != len(names):
            raise GraphFormatError("duplicate node type names")
        if len(self.node_types) + len(self.edge_types) <= 2:
            raise GraphFormatError("need |node types| + |edge types| > 2")
        if not any(tr for _, tr in self.node_types):
            raise GraphFormatError("schema needs at least one text-rich node type")
        known = set(names)
        for et in self.edge_types:
            if et.src_type not in known or et.dst_type not in known:
                raise GraphFormatError(f"edge type {et.name!r} references unknown node type")

    def is_text_rich(self, type_name):
        for name, tr in self.node_types:
            if name == type_name:
                return tr
        raise GraphFormatError(f"unknown node type {type_name!r}")

    def text_rich_types(self):
        return [n for n, tr in self.node_types if tr]

    def textless_types(self):
        return [n for n, tr in self.node_types if not tr]

    def edge_type(self, name):
        for et in self.edge_types:
            if et.name == name:
                return et
        raise GraphFormatError(f"unknown edge type {name!r}")

    def neighbor_type(self, center_type, edge_type_name):
        """The node type reached from ``center_type`` over this edge type."""
        et = self.edge_type(edge_type_name)
        if et.src_type == center_type:
            return et.dst_type
        if et.dst_type == center_type:
            return et.src_type
        return None


class HeteroGraph:
    """Immutable after construction; safe for concurrent read-only use."""

    def __init__(self, schema):
        self.schema = schema
        self.node_type = {}   # id -> type name
        self.text = {}        # id -> document (text-rich nodes only)
        self.edges = []       # list of (src, dst, edge type name)
        self._edge_set = set()
        self.adj = {}         # id -> {edge type -> [neighbor ids]}

    # -- construction ------------------------------------------------------

    def add_node(self, node_id, type_name, text=None):
        tr = self.schema.is_text_rich(type_name)
        if tr and text is None:
            raise GraphFormatError(f"text-rich node {node_id!r} has no text")
        if not tr and text:
            raise GraphFormatError(f"textless node {node_id!r} carries text")
        if node_id in self.node_type:
            raise GraphFormatError(f"duplicate node id {node_id!r}")
        self.node_type[node_id] = type_name
        if tr:
            self.text[node_id] = text
        self.adj[node_id] = {}

    def add_edge(self, src, dst, edge_type_name):
        et = self.schema.edge_type(edge_type_name)
        for end in (src, dst):
            if end not in self.node_type:
                raise GraphFormatError(f"edge references missing node id {end!r}")
        ts, td = self.node_type[src], self.node_type[dst]
        if {ts, td} != {et.src_type, et.dst_type} and (ts, td) != (et.src_type, et.dst_type):
            raise GraphFormatError(
                f"edge ({src!r},{dst!r}) has endpoint types ({ts},{td}), "
                f"but {edge_type_name!r} declares ({et.src_type},{et.dst_type})")
        key = (min(src, dst), max(src, dst), edge_type_name)
        if key in self._edge_set:
            return  # duplicates collapsed
        self._edge_set.add(key)
        self.edges.append((src, dst, edge_type_name))
        self.adj[src].setdefault(edge_type_name, []).append(dst)
        if dst != src:
            self.adj[dst].setdefault(edge_type_name, []).append(src)

    # -- queries -----------------------------------------------------------

    def is_text_rich(self, node_id):
        return self.schema.is_text_rich(self.node_type[node_id])

    def neighbors(self, node_id, edge_type_name):
        return self.adj[node_id].get(edge_type_name, [])

    def nodes_of_type(self, type_name):
        return sorted(n for n, t in self.node_type.items() if t == type_name)

    def edges_of_type(self, edge_type_name):
        return [(s, d) for s, d, e in self.edges if e == edge_type_name]


@dataclass
class NeighborSample:
    """Per-type sampled neighbors of one text-rich center, padded to budget.

    ``text_rich``/``textless`` list (edge type, ids, mask) blocks in schema
    edge-type order; ``ids`` has exactly the budgeted length, with ``None``
    in padded slots and ``mask`` False there.
    """

    center: str
    text_rich: list = field(default_factory=list)
    textless: list = field(default_factory=list)


def sample_neighbors(g, center, budgets, seed):
    """Uniform without-replacement neighbor sampling per edge type.

    Deterministic given ``seed``.  When a node has fewer neighbors than the
    budget, all are taken and the remaining slots are masked padding.
    """
    if center not in g.node_type:
        raise GraphFormatError(f"unknown center node {center!r}")
    if not g.is_text_rich(center):
        raise GraphFormatError(f"center {center!r} is not text-rich")
    rng = np.random.default_rng(seed)
    center_type = g.node_type[center]
    sample = NeighborSample(center=center)
    for et in g.schema.edge_types:
        budget = budgets.get(et.name, 0)
        nbr_type = g.schema.neighbor_type(center_type, et.name)
        if nbr_type is None or budget == 0:
            continue
        nbrs = g.neighbors(center, et.name)
        if len(nbrs) <= budget:
            chosen = list(nbrs)
        else:
            chosen = [nbrs[i] for i in rng.choice(len(nbrs), size=budget, replace=False)]
        mask = [True] * len(chosen) + [False] * (budget - len(chosen))
        ids = chosen + [None] * (budget - len(chosen))
        block = (et.name, ids, mask)
        if g.schema.is_text_rich(nbr_type):
            sample.text_rich.append(block)
        else:
            sample.textless.append(block)
    return sample


def split_edges(g, query_edge_type, fractions, seed):
    """Disjoint train/dev/test split of one edge type's edges.

    Sizes are within 1 of the exact fractions; deterministic given seed.
    """
    ftrain, fdev, ftest = fractions
    for f in fractions:
        if not 0.0 <= f <= 1.0:
            raise ValueError(f"fraction {f} outside [0, 1]")
    if abs(ftrain + fdev + ftest - 1.0) > 1e-9:
        raise ValueError(f"fractions {fractions} do not sum to 1")
    edges = g.edges_of_type(query_edge_type)
    edges = sorted(edges)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(edges))
    n = len(edges)
    n_train = round(n * ftrain)
    n_dev = round(n * fdev)
    if n_train + n_dev > n:
        n_dev = n - n_train
    train = [edges[i] for i in order[:n_train]]
    dev = [edges[i] for i in order[n_train:n_train + n_dev]]
    test = [edges[i] for i in order[n_train + n_dev:]]
    return train, dev, test


# ---------------------------------------------------------------------------
# File formats: schema, nodes (id<TAB>type<TAB>text), edges (src<TAB>dst<TAB>type)


def load_schema(path):
    node_types = []
    edge_types = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "node_type" and len(parts) == 3 and parts[2] in ("text_rich", "textless"):
                node_types.append((parts[1], parts[2] == "text_rich"))
            elif parts[0] == "edge_type" and len(parts) == 4:
                edge_types.append(EdgeType(parts[1], parts[2], parts[3]))
            else:
                raise GraphFormatError(f"{path}:{lineno}: malformed schema line: {line!r}")
    return NodeTypeSchema(tuple(node_types), tuple(edge_types))


def write_schema(schema, path):
    with open(path, "w", encoding="utf-8") as fh:
        for name, tr in schema.node_types:
            fh.write(f"node_type {name} {'text_rich' if tr else 'textless'}\n")
        for et in schema.edge_types:
            fh.write(f"edge_type {et.name} {et.src_type} {et.dst_type}\n")


def load_graph(nodes_path, edges_path, schema):
    """Read the tab-separated node and edge files into a validated graph."""
    g = HeteroGraph(schema)
    with open(nodes_path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise GraphFormatError(f"{nodes_path}:{lineno}: expected 3 tab-separated fields")
            node_id, type_name, text = parts
            try:
                g.add_node(node_id, type_name, text if text else None)
            except GraphFormatError as e:
                raise GraphFormatError(f"{nodes_path}:{lineno}: {e}") from e
    with open(edges_path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise GraphFormatError(f"{edges_path}:{lineno}: expected 3 tab-separated fields")
            try:
                g.add_edge(*parts)
            except GraphFormatError as e:
                raise GraphFormatError(f"{edges_path}:{lineno}: {e}") from e
    return g


def write_graph(g, nodes_path, edges_path):
    with open(nodes_path, "w", encoding="utf-8") as fh:
        for node_id in sorted(g.node_type):
            text = g.text.get(node_id, "")
            if "\t" in text:
                raise GraphFormatError(f"node {node_id!r} text contains a tab")
            fh.write(f"{node_id}\t{g.node_type[node_id]}\t{text}\n")
    with open(edges_path, "w", encoding="utf-8") as fh:
        for src, dst, et in g.edges:
            fh.write(f"{src}\t{dst}\t{et}\n")
