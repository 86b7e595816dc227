"""The GNN-nested transformer encoder and its cascaded baseline.

Per layer, a text-rich node's [CLS]-state attends over its typed neighbors
(two separate multi-head aggregations: one over text-rich neighbors, one
over textless neighbors), the two aggregation vectors are prepended and
appended to the token-state sequence, and an asymmetric multi-head
attention layer (queries from the s token states, keys/values from the
s + 2 augmented states) mixes everything back into the token states.
Text-rich neighbors themselves are updated with plain symmetric layers.

Vectors are rows; all projection matrices are stored right-multiplied
(``x @ W``).  Heads slice the projected width into contiguous chunks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import text as textmod
from .graph import NeighborSample
from .tensor import ContractError, Tensor

ABLATIONS = ("full", "no_agg", "no_tr", "no_tl")
ARCHITECTURES = ("nested", "cascaded")


@dataclass
class HeterformerConfig:
    dim: int = 64
    heads: int = 4
    layers: int = 2            # nested layers; total transformer layers = layers + 1
    seq_len: int = 32
    mlp_hidden: int = 0        # 0 means 4 * dim
    textless_dim: int = 64
    budgets: dict = field(default_factory=dict)   # edge type name -> count
    ablation: str = "full"
    arch: str = "nested"
    ln_eps: float = 1e-12

    def __post_init__(self):
        if self.mlp_hidden == 0:
            self.mlp_hidden = 4 * self.dim
        if self.dim % self.heads != 0:
            raise ContractError(f"head count {self.heads} must divide width {self.dim}")
        if self.layers < 1:
            raise ContractError("need at least one nested layer")
        if self.ablation not in ABLATIONS:
            raise ContractError(f"unknown ablation {self.ablation!r}")
        if self.arch not in ARCHITECTURES:
            raise ContractError(f"unknown architecture {self.arch!r}")


# ---------------------------------------------------------------------------
# Parameters


class LayerParams:
    """Weights of one transformer layer, plus aggregation weights for l >= 1."""

    def __init__(self, rng, dim, mlp_hidden, with_aggregation):
        def gauss(*shape):
            return T.param(rng.normal(0.0, 0.02, shape))

        self.wq, self.wk, self.wv = gauss(dim, dim), gauss(dim, dim), gauss(dim, dim)
        if with_aggregation:
            self.agg_tr = (gauss(dim, dim), gauss(dim, dim), gauss(dim, dim))
            self.agg_tl = (gauss(dim, dim), gauss(dim, dim), gauss(dim, dim))
        else:
            self.agg_tr = None
            self.agg_tl = None
        self.mlp_w1 = gauss(dim, mlp_hidden)
        self.mlp_b1 = T.param(np.zeros(mlp_hidden))
        self.mlp_w2 = gauss(mlp_hidden, dim)
        self.mlp_b2 = T.param(np.zeros(dim))
        self.ln1_gamma = T.param(np.ones(dim))
        self.ln1_beta = T.param(np.zeros(dim))
        self.ln2_gamma = T.param(np.ones(dim))
        self.ln2_beta = T.param(np.zeros(dim))

    def named(self, prefix):
        yield prefix + ".wq", self.wq
        yield prefix + ".wk", self.wk
        yield prefix + ".wv", self.wv
        if self.agg_tr is not None:
            for tag, triple in (("agg_tr", self.agg_tr), ("agg_tl", self.agg_tl)):
                for sub, t in zip(("wq", "wk", "wv"), triple):
                    yield f"{prefix}.{tag}.{sub}", t
        yield prefix + ".mlp_w1", self.mlp_w1
        yield prefix + ".mlp_b1", self.mlp_b1
        yield prefix + ".mlp_w2", self.mlp_w2
        yield prefix + ".mlp_b2", self.mlp_b2
        yield prefix + ".ln1_gamma", self.ln1_gamma
        yield prefix + ".ln1_beta", self.ln1_beta
        yield prefix + ".ln2_gamma", self.ln2_gamma
        yield prefix + ".ln2_beta", self.ln2_beta


class TextlessParams:
    """Low-dimensional node embeddings plus per-type, per-layer projections."""

    def __init__(self, rng, type_nodes, dz, dim, n_layers):
        self.dz = dz
        self.index = {}   # type -> {node id: row}
        self.z = {}       # type -> Tensor (n, dz)
        self.proj = {}    # type -> [Tensor (dz, dim)] for layers 1..n_layers
        for type_name in sorted(type_nodes):
            ids = sorted(type_nodes[type_name])
            self.index[type_name] = {nid: i for i, nid in enumerate(ids)}
            self.z[type_name] = T.param(rng.normal(0.0, 0.02, (len(ids), dz)))
            self.proj[type_name] = [
                T.param(rng.normal(0.0, 0.02, (dz, dim))) for _ in range(n_layers)
            ]

    def named(self):
        for type_name in sorted(self.z):
            yield f"textless.{type_name}.z", self.z[type_name]
            for l, p in enumerate(self.proj[type_name], start=1):
                yield f"textless.{type_name}.proj{l}", p


class ModelParams:
    """Every learnable weight of the model, iterable in a fixed name order."""

    def __init__(self, schema, vocab_size, type_nodes, cfg, seed):
        rng = np.random.default_rng(seed)
        d = cfg.dim
        self.token_emb = T.param(rng.normal(0.0, 0.02, (vocab_size, d)))
        self.pos_emb = T.param(rng.normal(0.0, 0.02, (cfg.seq_len, d)))
        self.layers = [
            LayerParams(rng, d, cfg.mlp_hidden, with_aggregation=(l >= 1))
            for l in range(cfg.layers + 1)
        ]
        # Relation projections start near the identity so that early training
        # approximates relation-agnostic aggregation.
        self.relation = {
            et.name: T.param(np.eye(d) + rng.normal(0.0, 0.02, (d, d)))
            for et in schema.edge_types
        }
        tl_nodes = {t: type_nodes.get(t, []) for t in schema.textless_types()}
        self.textless = TextlessParams(rng, tl_nodes, cfg.textless_dim, d, cfg.layers)
        self.cascade_w = T.param(rng.normal(0.0, 0.02, (d, d)))
        self.cascade_b = T.param(np.zeros(d))

    def named_parameters(self):
        yield "token_emb", self.token_emb
        yield "pos_emb", self.pos_emb
        for l, lp in enumerate(self.layers):
            yield from lp.named(f"layer{l}")
        for name in sorted(self.relation):
            yield f"relation.{name}", self.relation[name]
        yield from self.textless.named()
        yield "cascade_w", self.cascade_w
        yield "cascade_b", self.cascade_b

    def all_tensors(self):
        return [t for _, t in self.named_parameters()]


# ---------------------------------------------------------------------------
# Layer operations (shape-generic: leading batch axes allowed)


def _heads(x, heads):
    axis = x.data.ndim - 1
    dk = x.data.shape[-1] // heads
    return [T.narrow(x, axis, i * dk, dk) for i in range(heads)]


def _attention(q, k, v, key_mask, heads):
    """Multi-head scaled dot-product attention.

    q: (.., nq, d), k/v: (.., nk, d); ``key_mask`` is a boolean array
    broadcastable to the (.., nq, nk) score shape.  Projections are applied
    by the caller; heads are contiguous chunks of the projected width.
    """
    dk = q.data.shape[-1] // heads
    inv = 1.0 / math.sqrt(dk)
    outs = []
    for qi, ki, vi in zip(_heads(q, heads), _heads(k, heads), _heads(v, heads)):
        scores = T.scale(T.matmul(qi, T.transpose_last(ki)), inv)
        att = T.masked_softmax(scores, key_mask)
        outs.append(T.matmul(att, vi))
    return T.concat(outs, axis=q.data.ndim - 1)


def mha_aggregate(h_x, candidates, mask, weights, heads):
    """Attention of a center state over candidate neighbor states.

    ``h_x``: (.., 1, d) query state; ``candidates``: (.., m, d) with the
    center's own state in row 0 and (relation-projected) neighbor states
    after it; ``mask``: boolean (.., 1, m), True for real slots (the self
    slot is always real).  Returns the head-concatenated (.., 1, d) vector.
    """
    wq, wk, wv = weights
    q = T.matmul(h_x, wq)
    k = T.matmul(candidates, wk)
    v = T.matmul(candidates, wv)
    return _attention(q, k, v, mask, heads)


def aggregate_text_rich(h_x, neighbors, mask, layer, params, heads):
    """Single-center text-rich neighbor aggregation.

    ``neighbors`` is a list of (state Tensor[d], edge type name); ``mask``
    marks real (non-padded) slots.  Neighbor states are relation-projected;
    the self state enters unprojected.
    """
    lp = params.layers[layer]
    if lp.agg_tr is None:
        raise ContractError(f"layer {layer} has no aggregation weights")
    d = h_x.data.shape[-1]
    rows = [T.reshape(h_x, (1, 1, d))]
    for state, et in neighbors:
        proj = T.matmul(T.reshape(state, (1, 1, d)), params.relation[et])
        rows.append(proj)
    cand = T.concat(rows, axis=1)
    full_mask = np.array([True] + list(mask), dtype=bool).reshape(1, 1, -1)
    out = mha_aggregate(T.reshape(h_x, (1, 1, d)), cand, full_mask, lp.agg_tr, heads)
    return T.reshape(out, (d,))


def aggregate_textless(h_x, neighbors, mask, layer, params, graph, heads):
    """Single-center textless neighbor aggregation.

    Identical attention mechanics to :func:`aggregate_text_rich` but with
    the textless projection weights, and neighbor states produced from the
    low-dimensional embeddings via the per-type layer projection.
    """
    lp = params.layers[layer]
    if lp.agg_tl is None:
        raise ContractError(f"layer {layer} has no aggregation weights")
    d = h_x.data.shape[-1]
    rows = [T.reshape(h_x, (1, 1, d))]
    for node_id, et in neighbors:
        state = encode_textless(node_id, layer, params, graph)
        proj = T.matmul(T.reshape(state, (1, 1, d)), params.relation[et])
        rows.append(proj)
    cand = T.concat(rows, axis=1)
    full_mask = np.array([True] + list(mask), dtype=bool).reshape(1, 1, -1)
    out = mha_aggregate(T.reshape(h_x, (1, 1, d)), cand, full_mask, lp.agg_tl, heads)
    return T.reshape(out, (d,))


def encode_textless(node_id, layer, params, graph):
    """Project a textless node's low-dimensional embedding at one layer."""
    type_name = graph.node_type[node_id]
    if graph.schema.is_text_rich(type_name):
        raise ContractError(f"node {node_id!r} is text-rich")
    if not 1 <= layer <= len(params.textless.proj[type_name]):
        raise ContractError(f"layer {layer} outside 1..L")
    row = params.textless.index[type_name][node_id]
    z = T.index_rows(params.textless.z[type_name], [row])
    return T.reshape(T.matmul(z, params.textless.proj[type_name][layer - 1]), (-1,))


def dispatch(agg_tr, token_states, agg_tl):
    """Build the augmented sequence: aggregation row, tokens, aggregation row."""
    d = token_states.data.shape[-1]
    return T.concat(
        [T.reshape(agg_tr, (1, d)), token_states, T.reshape(agg_tl, (1, d))], axis=0)


def joint_encode_layer(token_states, augmented, key_mask, lp, heads, eps=1e-12):
    """One transformer layer with asymmetric attention.

    Queries come from the (.., s, d) token states; keys and values from the
    (.., s+2, d) augmented states.  ``key_mask`` is boolean, broadcastable
    to the (.., s, s+2) score shape; padded token columns are masked, the
    two aggregation rows are controlled by the caller.
    """
    att = _attention(
        T.matmul(token_states, lp.wq),
        T.matmul(augmented, lp.wk),
        T.matmul(augmented, lp.wv),
        key_mask, heads)
    a = T.layer_norm(T.add(token_states, att), lp.ln1_gamma, lp.ln1_beta, eps)
    hidden = T.gelu(T.add(T.matmul(a, lp.mlp_w1), lp.mlp_b1))
    m = T.add(T.matmul(hidden, lp.mlp_w2), lp.mlp_b2)
    return T.layer_norm(T.add(a, m), lp.ln2_gamma, lp.ln2_beta, eps)


def plain_transformer_layer(token_states, token_mask, lp, heads, eps=1e-12):
    """Standard symmetric self-attention layer (queries = keys = values)."""
    return joint_encode_layer(token_states, token_states, token_mask, lp, heads, eps)


# ---------------------------------------------------------------------------
# Whole-model encoder


class Heterformer:
    """Bundles graph, vocabulary, parameters, and config into an encoder.

    Parameters are immutable during evaluation; training mutates them from
    a single writer between batches.
    """

    def __init__(self, graph, vocab, params, cfg):
        self.graph = graph
        self.vocab = vocab
        self.params = params
        self.cfg = cfg
        self._seq_cache = {}

    def sequence(self, node_id):
        seq = self._seq_cache.get(node_id)
        if seq is None:
            seq = textmod.encode_text(self.graph.text[node_id], self.vocab)
            self._seq_cache[node_id] = seq
        return seq

    # -- public encoding entry points -------------------------------------

    def encode_center(self, sample, ablation=None):
        """Embed one text-rich center node; returns a Tensor[d]."""
        out = self.encode_batch([sample], ablation=ablation)
        return T.reshape(out, (self.cfg.dim,))

    def encode_batch(self, samples, ablation=None):
        """Embed a batch of sampled centers; returns a Tensor[B, d].

        Centers are grouped by node type internally (the per-type neighbor
        slot layout is static per center type).
        """
        if self.cfg.arch == "cascaded":
            return self.encode_cascaded_batch(samples)
        order = {}
        for i, s in enumerate(samples):
            order.setdefault(self.graph.node_type[s.center], []).append(i)
        if len(order) == 1:
            return self._encode_group(samples, ablation)
        parts = {}
        for type_name, idxs in order.items():
            group = self._encode_group([samples[i] for i in idxs], ablation)
            for j, i in enumerate(idxs):
                parts[i] = T.narrow(group, 0, j, 1)
        return T.concat([parts[i] for i in range(len(samples))], axis=0)

    def encode_texts(self, texts):
        """Plain-stack encoding of raw texts (no neighbors); Tensor[n, d].

        This is the text-only path used for retrieval queries and as the
        frozen target of the warm-up phase.
        """
        seqs = [textmod.encode_text(t, self.vocab) for t in texts]
        ids = np.array([s.ids for s in seqs])
        mask = np.array([s.mask for s in seqs], dtype=bool)
        h = self._embed(ids)
        for lp in self.params.layers:
            h = plain_transformer_layer(h, mask[:, None, :], lp, self.cfg.heads, self.cfg.ln_eps)
        return T.reshape(T.narrow(h, 1, 0, 1), (len(texts), self.cfg.dim))

    def textless_embedding(self, node_id):
        """Output embedding of a textless node (layer-1 projection)."""
        return encode_textless(node_id, 1, self.params, self.graph)

    # -- internals ---------------------------------------------------------

    def _embed(self, ids):
        tok = T.index_rows(self.params.token_emb, ids)
        return T.add(tok, self.params.pos_emb)

    def _collect(self, samples):
        """Index maps for one uniform-type group of samples."""
        ids = []
        pos = {}

        def idx_of(nid):
            i = pos.get(nid)
            if i is None:
                i = pos[nid] = len(ids)
                ids.append(nid)
            return i

        center_idx = np.array([idx_of(s.center) for s in samples])
        tr_blocks = []   # (edge type, (B, budget) int index matrix, (B, budget) mask)
        if samples[0].text_rich:
            for bi, (et, _, _) in enumerate(samples[0].text_rich):
                mat = np.zeros((len(samples), len(samples[0].text_rich[bi][1])), dtype=int)
                msk = np.zeros(mat.shape, dtype=bool)
                for r, s in enumerate(samples):
                    _, nbr_ids, nbr_mask = s.text_rich[bi]
                    for c, (nid, real) in enumerate(zip(nbr_ids, nbr_mask)):
                        if real:
                            mat[r, c] = idx_of(nid)
                            msk[r, c] = True
                tr_blocks.append((et, mat, msk))
        tl_blocks = []   # (edge type, neighbor type, (B, budget) z-row matrix, mask)
        tlp = self.params.textless
        if samples[0].textless:
            center_type = self.graph.node_type[samples[0].center]
            for bi, (et, _, _) in enumerate(samples[0].textless):
                nbr_type = self.graph.schema.neighbor_type(center_type, et)
                mat = np.zeros((len(samples), len(samples[0].textless[bi][1])), dtype=int)
                msk = np.zeros(mat.shape, dtype=bool)
                for r, s in enumerate(samples):
                    _, nbr_ids, nbr_mask = s.textless[bi]
                    for c, (nid, real) in enumerate(zip(nbr_ids, nbr_mask)):
                        if real:
                            mat[r, c] = tlp.index[nbr_type][nid]
                            msk[r, c] = True
                tl_blocks.append((et, nbr_type, mat, msk))
        return ids, center_idx, tr_blocks, tl_blocks

    def _aggregate_blocks(self, h_x, blocks, project, weights, heads):
        """Shared batched aggregation: self slot + per-edge-type blocks."""
        b = h_x.data.shape[0]
        rows = [h_x]
        masks = [np.ones((b, 1), dtype=bool)]
        for block in blocks:
            states, msk = project(block)
            rows.append(states)
            masks.append(msk)
        cand = rows[0] if len(rows) == 1 else T.concat(rows, axis=1)
        mask = np.concatenate(masks, axis=1)[:, None, :]
        return mha_aggregate(h_x, cand, mask, weights, heads)

    def _encode_group(self, samples, ablation=None):
        cfg = self.cfg
        abl = cfg.ablation if ablation is None else ablation
        if abl not in ABLATIONS:
            raise ContractError(f"unknown ablation {abl!r}")
        p = self.params
        big = len(samples)
        if abl == "no_agg":
            # both aggregation rows are key-masked with exact zero weight, so
            # neighbors cannot influence the output; skip collecting them
            samples = [NeighborSample(center=s.center) for s in samples]
        ids, center_idx, tr_blocks, tl_blocks = self._collect(samples)
        seqs = [self.sequence(n) for n in ids]
        tok_ids = np.array([s.ids for s in seqs])
        tok_mask = np.array([s.mask for s in seqs], dtype=bool)

        h = self._embed(tok_ids)                                   # (n, s, d)
        h = plain_transformer_layer(h, tok_mask[:, None, :], p.layers[0], cfg.heads, cfg.ln_eps)
        hc = T.index_rows(h, center_idx)                           # (B, s, d)
        center_tok_mask = tok_mask[center_idx]

        for l in range(1, cfg.layers + 1):
            lp = p.layers[l]
            cls = T.reshape(T.narrow(h, 1, 0, 1), (len(ids), cfg.dim))
            h_x = T.narrow(hc, 1, 0, 1)                            # (B, 1, d)

            def project_tr(block):
                et, mat, msk = block
                states = T.matmul(T.index_rows(cls, mat), p.relation[et])
                return states, msk

            def project_tl(block, layer=l):
                et, nbr_type, mat, msk = block
                z = T.index_rows(p.textless.z[nbr_type], mat)
                states = T.matmul(z, p.textless.proj[nbr_type][layer - 1])
                return T.matmul(states, p.relation[et]), msk

            agg_tr = self._aggregate_blocks(h_x, tr_blocks, project_tr, lp.agg_tr, cfg.heads)
            agg_tl = self._aggregate_blocks(h_x, tl_blocks, project_tl, lp.agg_tl, cfg.heads)
            augmented = T.concat([agg_tr, hc, agg_tl], axis=1)     # (B, s+2, d)

            tr_row = abl not in ("no_agg", "no_tr")
            tl_row = abl not in ("no_agg", "no_tl")
            key_mask = np.concatenate(
                [np.full((big, 1), tr_row), center_tok_mask, np.full((big, 1), tl_row)],
                axis=1, dtype=bool)[:, None, :]
            hc = joint_encode_layer(hc, augmented, key_mask, lp, cfg.heads, cfg.ln_eps)
            if l < cfg.layers:
                h = plain_transformer_layer(h, tok_mask[:, None, :], lp, cfg.heads, cfg.ln_eps)

        return T.reshape(T.narrow(hc, 1, 0, 1), (big, cfg.dim))

    def encode_cascaded_batch(self, samples):
        """Text first, one mean aggregation afterwards (the baseline)."""
        cfg = self.cfg
        p = self.params
        big = len(samples)
        ids, center_idx, tr_blocks, tl_blocks = self._collect(samples)
        seqs = [self.sequence(n) for n in ids]
        tok_ids = np.array([s.ids for s in seqs])
        tok_mask = np.array([s.mask for s in seqs], dtype=bool)
        h = self._embed(tok_ids)
        for lp in p.layers:
            h = plain_transformer_layer(h, tok_mask[:, None, :], lp, cfg.heads, cfg.ln_eps)
        cls = T.reshape(T.narrow(h, 1, 0, 1), (len(ids), cfg.dim))

        rows = [T.reshape(T.index_rows(cls, center_idx), (big, 1, cfg.dim))]
        masks = [np.ones((big, 1), dtype=bool)]
        for et, mat, msk in tr_blocks:
            rows.append(T.matmul(T.index_rows(cls, mat), p.relation[et]))
            masks.append(msk)
        for et, nbr_type, mat, msk in tl_blocks:
            z = T.index_rows(p.textless.z[nbr_type], mat)
            states = T.matmul(z, p.textless.proj[nbr_type][0])
            rows.append(T.matmul(states, p.relation[et]))
            masks.append(msk)
        cand = rows[0] if len(rows) == 1 else T.concat(rows, axis=1)
        mask = np.concatenate(masks, axis=1)
        weights = mask[:, :, None] / mask.sum(axis=1, keepdims=True)[:, :, None]
        mean = T.reshape(
            T.matmul(T.transpose_last(Tensor(weights)), cand), (big, cfg.dim))
        return T.gelu(T.add(T.matmul(mean, p.cascade_w), p.cascade_b))
