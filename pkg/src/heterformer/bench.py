"""Timing harness contrasting per-layer encoding costs.

Three variants are timed over a grid of (P tokens per sequence, M text-rich
neighbors, N textless neighbors):

* ``nested``: one nested layer step — plain updates of the M+1 sequences,
  the two neighbor aggregations, and the asymmetric joint encoding over
  P + 2 keys.  Cost stays nearly flat in N.
* ``cascaded``: one plain transformer layer pass over the M+1 sequences
  (the per-layer cost of encode-then-aggregate pipelines).
* ``concat``: one attention layer over a single concatenated sequence in
  which every neighbor, text-rich or textless, occupies a P-row block —
  quadratic in the number of neighbors.

Forward passes only, raw numpy, no tape.  The concat variant computes
attention in query chunks to bound memory.
"""

from __future__ import annotations

import math
import time

import numpy as np


def _softmax_rows(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _plain_layer_forward(h, wq, wk, wv, w1, w2):
    """Symmetric attention + MLP, no norms/masks; enough for cost scaling."""
    q = h @ wq
    k = h @ wk
    v = h @ wv
    att = _softmax_rows(q @ np.swapaxes(k, -1, -2) / math.sqrt(h.shape[-1])) @ v
    a = h + att
    return a + np.maximum(a @ w1, 0.0) @ w2


def _chunked_attention(h, wq, wk, wv, chunk=512):
    q = h @ wq
    k = h @ wk
    v = h @ wv
    out = np.empty_like(q)
    inv = 1.0 / math.sqrt(h.shape[-1])
    for lo in range(0, h.shape[0], chunk):
        scores = q[lo:lo + chunk] @ k.T * inv
        out[lo:lo + chunk] = _softmax_rows(scores) @ v
    return out


class _Workload:
    def __init__(self, p, m, n, dim, dz, rng):
        self.p, self.m, self.n, self.dim = p, m, n, dim
        self.seqs = rng.normal(size=(m + 1, p, dim))
        self.z = rng.normal(size=(n, dz))
        self.w = {name: rng.normal(size=(dim, dim)) * 0.02
                  for name in ("wq", "wk", "wv", "rel", "aq", "ak", "av")}
        self.w1 = rng.normal(size=(dim, 4 * dim)) * 0.02
        self.w2 = rng.normal(size=(4 * dim, dim)) * 0.02
        self.wphi = rng.normal(size=(dz, dim)) * 0.02

    def nested(self):
        w = self.w
        h = _plain_layer_forward(self.seqs, w["wq"], w["wk"], w["wv"], self.w1, self.w2)
        cls = h[:, 0, :]
        # text-rich aggregation over M + 1 candidates
        cand = np.concatenate([cls[:1], cls[1:] @ w["rel"]], axis=0)
        agg_tr = _softmax_rows((cls[0] @ w["aq"]) @ (cand @ w["ak"]).T) @ (cand @ w["av"])
        # textless aggregation over N + 1 candidates
        tl = np.concatenate([cls[:1], (self.z @ self.wphi) @ w["rel"]], axis=0)
        agg_tl = _softmax_rows((cls[0] @ w["aq"]) @ (tl @ w["ak"]).T) @ (tl @ w["av"])
        aug = np.concatenate([agg_tr[None, :], h[0], agg_tl[None, :]], axis=0)
        q = h[0] @ w["wq"]
        att = _softmax_rows(q @ (aug @ w["wk"]).T / math.sqrt(self.dim)) @ (aug @ w["wv"])
        a = h[0] + att
        return a + np.maximum(a @ self.w1, 0.0) @ self.w2

    def cascaded(self):
        w = self.w
        return _plain_layer_forward(self.seqs, w["wq"], w["wk"], w["wv"], self.w1, self.w2)

    def concat(self):
        w = self.w
        blocks = [self.seqs.reshape(-1, self.dim)]
        tl = np.zeros((self.n, self.p, self.dim))
        tl[:, 0, :] = (self.z @ self.wphi) @ w["rel"]
        blocks.append(tl.reshape(-1, self.dim))
        h = np.concatenate(blocks, axis=0)
        return _chunked_attention(h, w["wq"], w["wk"], w["wv"])


def _time(fn, repeats):
    times = []
    fn()  # warm-up
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    # minimum is the least contaminated estimate: interference from other
    # processes only ever adds time
    return float(min(times))


def run_benchmark(p=32, m=5, n_values=(16, 32, 64, 128, 256),
                  dim=64, dz=64, repeats=5, seed=0):
    """Returns rows of (variant, P, M, N, seconds)."""
    rng = np.random.default_rng(seed)
    rows = []
    for n in n_values:
        work = _Workload(p, m, n, dim, dz, rng)
        for variant, fn in (("nested", work.nested),
                            ("cascaded", work.cascaded),
                            ("concat", work.concat)):
            rows.append((variant, p, m, n, _time(fn, repeats)))
    return rows


def fitted_slope(rows, variant):
    """Least-squares slope of log(time) against log(N) for one variant."""
    pts = [(n, t) for v, _, _, n, t in rows if v == variant]
    x = np.log([n for n, _ in pts])
    y = np.log([t for _, t in pts])
    return float(np.polyfit(x, y, 1)[0])


def write_csv(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("variant,P,M,N,seconds\n")
        for variant, p, m, n, secs in rows:
            fh.write(f"{variant},{p},{m},{n},{secs!r}\n")
