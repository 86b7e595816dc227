import math

import numpy as np
import pytest

from heterformer import evaluate as EV
from heterformer.evaluate import (ProbeConfig, RankingResult, cluster_metrics,
                                  kmeans, linear_probe, metrics, rank_in_batch,
                                  read_embeddings, retrieve, write_embeddings)
from heterformer.tensor import ContractError

RNG = np.random.default_rng(17)


# ---------------------------------------------------------------------------
# Ranking


def test_strict_winner_rank_one():
    q = np.eye(3)
    r = rank_in_batch(q, q)
    assert r.ranks == [1, 1, 1]


def test_all_equal_pessimistic_rank():
    q = np.ones((4, 2))
    r = rank_in_batch(q, q)
    assert r.ranks == [4, 4, 4, 4]


def test_rank_matches_sort_oracle():
    for trial in range(30):
        rng = np.random.default_rng(trial)
        q = rng.normal(size=(6, 3))
        k = rng.normal(size=(6, 3))
        got = rank_in_batch(q, k).ranks
        scores = q @ k.T
        for i in range(6):
            oracle = 1 + sum(
                1 for j in range(6)
                if j != i and scores[i, j] >= scores[i, i])
            assert got[i] == oracle


def test_rank_needs_two_candidates():
    with pytest.raises(ContractError):
        rank_in_batch(np.ones((1, 2)), np.ones((1, 2)))


def test_metric_constants():
    perfect = metrics(RankingResult([1, 1, 1], 3))
    assert perfect == {"prec": 1.0, "mrr": 1.0, "ndcg": 1.0}
    m = metrics(RankingResult([1, 2, 4], 3))
    assert abs(m["mrr"] - (1 + 0.5 + 0.25) / 3) < 1e-9
    assert abs(m["mrr"] - 0.58333) < 5e-6
    m3 = metrics(RankingResult([3], 3))
    assert abs(m3["ndcg"] - 0.5) < 1e-9


# ---------------------------------------------------------------------------
# Probe


def separable_data(n_per_class=60, classes=3, dim=8, gap=6.0, seed=0):
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for c in range(classes):
        center = np.zeros(dim)
        center[c] = gap
        xs.append(center + rng.normal(size=(n_per_class, dim)))
        ys.append(np.full(n_per_class, c))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    order = rng.permutation(len(y))
    return x[order], y[order]


def test_probe_separable_data():
    x, y = separable_data()
    n = len(y)
    tr, dv = slice(0, int(0.7 * n)), slice(int(0.7 * n), int(0.8 * n))
    te = slice(int(0.8 * n), n)
    out = linear_probe((x[tr], y[tr]), (x[dv], y[dv]), (x[te], y[te]),
                       ProbeConfig(max_epochs=200, seed=0))
    assert out["prec"] >= 0.99
    assert out["ndcg"] >= out["prec"]


def test_probe_shuffled_labels_at_chance():
    x, y = separable_data(n_per_class=100, classes=2)
    rng = np.random.default_rng(1)
    y_shuf = rng.permutation(y)
    n = len(y)
    tr, dv = slice(0, int(0.7 * n)), slice(int(0.7 * n), int(0.8 * n))
    te = slice(int(0.8 * n), n)
    out = linear_probe((x[tr], y_shuf[tr]), (x[dv], y_shuf[dv]),
                       (x[te], y_shuf[te]), ProbeConfig(max_epochs=60, seed=0))
    n_te = n - int(0.8 * n)
    sigma = math.sqrt(0.5 * 0.5 / n_te)
    assert abs(out["prec"] - 0.5) < 3 * sigma + 0.05


def test_probe_deterministic():
    x, y = separable_data(n_per_class=30)
    split = ((x[:60], y[:60]), (x[60:70], y[60:70]), (x[70:], y[70:]))
    a = linear_probe(*split, ProbeConfig(max_epochs=40, seed=3))
    b = linear_probe(*split, ProbeConfig(max_epochs=40, seed=3))
    assert a == b


# ---------------------------------------------------------------------------
# Clustering


def blobs(n=100, gap=12.0, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, 4))
    b = rng.normal(size=(n, 4)) + gap
    return np.concatenate([a, b]), np.array([0] * n + [1] * n)


def test_kmeans_separated_blobs():
    x, truth = blobs()
    pred = np.array(kmeans(x, 2, seed=0))
    agree = max((pred == truth).mean(), (pred == 1 - truth).mean())
    assert agree == 1.0


def test_kmeans_k_equals_n():
    x = RNG.normal(size=(6, 3))
    pred = kmeans(x, 6, seed=0)
    assert sorted(pred) == list(range(6))


def test_kmeans_rejects_too_many_clusters():
    with pytest.raises(ContractError):
        kmeans(np.zeros((3, 2)), 4)


def test_kmeans_matches_sklearn_inertia():
    sklearn = pytest.importorskip("sklearn.cluster")
    x, _ = blobs(n=50, gap=3.0, seed=2)
    pred = np.array(kmeans(x, 3, seed=0, restarts=10))
    inertia = sum(((x[pred == c] - x[pred == c].mean(axis=0)) ** 2).sum()
                  for c in range(3))
    sk = sklearn.KMeans(n_clusters=3, n_init=10, random_state=0).fit(x)
    assert inertia <= sk.inertia_ * 1.01


def test_cluster_metrics_perfect_and_relabelled():
    truth = np.array([0, 0, 1, 1, 2, 2])
    assert cluster_metrics(truth, truth) == {"nmi": 1.0, "ari": 1.0}
    relabel = np.array([2, 2, 0, 0, 1, 1])
    m = cluster_metrics(relabel, truth)
    assert abs(m["nmi"] - 1.0) < 1e-12 and abs(m["ari"] - 1.0) < 1e-12


def test_cluster_metrics_chance_level():
    rng = np.random.default_rng(5)
    truth = rng.integers(0, 2, size=10_000)
    pred = rng.integers(0, 2, size=10_000)
    m = cluster_metrics(pred, truth)
    assert abs(m["ari"]) < 0.02


def test_cluster_metrics_match_sklearn():
    skm = pytest.importorskip("sklearn.metrics")
    for trial in range(20):
        rng = np.random.default_rng(trial)
        truth = rng.integers(0, 4, size=200)
        pred = rng.integers(0, 3, size=200)
        m = cluster_metrics(pred, truth)
        nmi = skm.normalized_mutual_info_score(truth, pred, average_method="arithmetic")
        ari = skm.adjusted_rand_score(truth, pred)
        assert abs(m["nmi"] - nmi) < 1e-10
        assert abs(m["ari"] - ari) < 1e-10


def test_cluster_metrics_length_check():
    with pytest.raises(ContractError):
        cluster_metrics([0, 1], [0, 1, 2])


# ---------------------------------------------------------------------------
# Retrieval


class FakeEncoder:
    def __init__(self, table):
        self.table = table

    def encode_texts(self, texts):
        from heterformer.tensor import Tensor
        return Tensor(np.array([self.table[t] for t in texts]))


def test_retrieve_matches_brute_force():
    rng = np.random.default_rng(3)
    embs = rng.normal(size=(20, 4))
    ids = [f"n{i:02d}" for i in range(20)]
    qvec = rng.normal(size=4)
    model = FakeEncoder({"q": qvec})
    hits = retrieve("q", ids, embs, model, k=5)
    scores = embs @ qvec
    oracle = sorted(range(20), key=lambda i: (-scores[i], ids[i]))[:5]
    assert [h[0] for h in hits] == [ids[i] for i in oracle]
    for nid, s in hits:
        assert abs(s - scores[ids.index(nid)]) < 1e-12


def test_retrieve_k_zero_and_clamping():
    embs = np.eye(3)
    ids = ["a", "b", "c"]
    model = FakeEncoder({"q": np.ones(3)})
    assert retrieve("q", ids, embs, model, k=0) == []
    logs = []
    hits = retrieve("q", ids, embs, model, k=10, log=logs.append)
    assert len(hits) == 3 and logs


def test_retrieve_tie_break_by_id():
    embs = np.ones((3, 2))
    model = FakeEncoder({"q": np.ones(2)})
    hits = retrieve("q", ["c", "a", "b"], embs, model, k=3)
    assert [h[0] for h in hits] == ["a", "b", "c"]


# ---------------------------------------------------------------------------
# Embedding files


def test_embeddings_round_trip(tmp_path):
    ids = ["x", "y"]
    embs = RNG.normal(size=(2, 5))
    path = tmp_path / "emb.tsv"
    write_embeddings(path, ids, embs)
    rid, remb = read_embeddings(path)
    assert rid == ids
    np.testing.assert_array_equal(remb, embs)


def test_embeddings_header_mismatch(tmp_path):
    path = tmp_path / "emb.tsv"
    path.write_text("3 2\na\t1.0 2.0\n")
    with pytest.raises(ValueError):
        read_embeddings(path)
