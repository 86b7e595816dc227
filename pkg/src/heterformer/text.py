"""Corpus-built vocabulary, tokenization, and initial sequence embeddings.

Documents are lowercased and split on non-alphanumeric characters.  Every
encoded sequence starts with [CLS] and is padded/truncated to a fixed
length; the [CLS]-row hidden state serves as the node representation
downstream.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass

from . import tensor as T

CLS_ID = 0
PAD_ID = 1
UNK_ID = 2
RESERVED = ("[CLS]", "[PAD]", "[UNK]")

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text):
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Frequency-ranked token table with fixed reserved ids 0/1/2."""

    def __init__(self, tokens, max_len):
        if max_len < 1:
            raise ValueError("max_len must be positive")
        self.id_to_token = list(RESERVED) + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("vocabulary tokens are not unique")
        self.max_len = max_len

    def __len__(self):
        return len(self.id_to_token)

    def lookup(self, token):
        return self.token_to_id.get(token, UNK_ID)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.id_to_token:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path, max_len):
        with open(path, encoding="utf-8") as fh:
            toks = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        if tuple(toks[:3]) != RESERVED:
            raise ValueError(f"{path}: reserved tokens missing or out of order")
        return cls(toks[3:], max_len)


@dataclass
class TokenSequence:
    """Fixed-length id sequence: [CLS], content, then contiguous [PAD]."""

    ids: list
    mask: list  # True = real token (includes [CLS])


def build_vocab(g, max_size, min_count=1, max_len=32):
    """Build a vocabulary from all text-rich documents in the graph.

    Tokens are ranked by descending frequency, ties broken lexically, and
    truncated to ``max_size`` corpus tokens (plus the 3 reserved ids).
    """
    counts = Counter()
    for text in g.text.values():
        counts.update(tokenize(text))
    if not counts:
        raise ValueError("empty corpus: no text-rich documents with tokens")
    ranked = sorted(
        (t for t, c in counts.items() if c >= min_count),
        key=lambda t: (-counts[t], t),
    )
    return Vocabulary(ranked[:max_size], max_len)


def encode_text(text, vocab):
    """[CLS] + first (max_len - 1) token ids, [PAD]-filled to max_len."""
    s = vocab.max_len
    content = [vocab.lookup(t) for t in tokenize(text)][: s - 1]
    ids = [CLS_ID] + content
    mask = [True] * len(ids)
    pad = s - len(ids)
    return TokenSequence(ids + [PAD_ID] * pad, mask + [False] * pad)


def embed_sequence(seq, token_emb, pos_emb):
    """Token-plus-position embedding lookup; gradient reaches both tables."""
    if len(seq.ids) > pos_emb.data.shape[0]:
        raise ValueError(
            f"sequence length {len(seq.ids)} exceeds {pos_emb.data.shape[0]} positions")
    tok = T.index_rows(token_emb, seq.ids)
    return T.add(tok, T.narrow(pos_emb, 0, 0, len(seq.ids)))
