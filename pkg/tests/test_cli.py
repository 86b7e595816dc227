import json
import os

import numpy as np
import pytest

from heterformer import cli
from heterformer.evaluate import read_embeddings


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    rc = cli.main(["generate", "--out", str(out), "--docs", "120",
                   "--topics", "3", "--seed", "7"])
    assert rc == 0
    rc = cli.main(["vocab", "--schema", str(out / "schema.txt"),
                   "--nodes", str(out / "nodes.tsv"),
                   "--edges", str(out / "edges.tsv"), "--out", str(out)])
    assert rc == 0
    return out


def base_args(data_dir, out):
    return ["--schema", str(data_dir / "schema.txt"),
            "--nodes", str(data_dir / "nodes.tsv"),
            "--edges", str(data_dir / "edges.tsv"),
            "--vocab-file", str(data_dir / "vocab.txt"),
            "--out", str(out),
            "--dim", "16", "--heads", "2", "--textless-dim", "8",
            "--batch-size", "8", "--test-batch-size", "10",
            "--learning-rate", "1e-3", "--max-epochs", "1",
            "--warmup-epochs", "1", "--seed", "7"]


def test_generate_writes_all_files(data_dir):
    for name in ("schema.txt", "nodes.tsv", "edges.tsv", "labels.tsv", "vocab.txt"):
        assert (data_dir / name).exists()


def test_train_and_eval(tmp_path, data_dir):
    out = tmp_path / "run"
    assert cli.main(["train"] + base_args(data_dir, out)) == 0
    assert (out / "model.ckpt").exists()
    trace = (out / "trace.csv").read_text().splitlines()
    assert trace[0] == "epoch,train_loss,dev_prec"
    assert len(trace) == 2

    args = base_args(data_dir, out) + ["--ckpt", str(out / "model.ckpt"),
                                       "--labels", str(data_dir / "labels.tsv")]
    assert cli.main(["eval", "--cluster"] + args) == 0
    metrics = dict(line.split(" ", 1)
                   for line in (out / "metrics.txt").read_text().splitlines())
    for key in ("prec", "mrr", "ndcg", "nmi", "ari"):
        assert key in metrics
        float(metrics[key])


def test_resolved_config_echo(tmp_path, data_dir):
    out = tmp_path / "cfg"
    assert cli.main(["vocab"] + base_args(data_dir, out)) == 0
    doc = json.loads((out / "resolved_config.json").read_text())
    assert doc["model"]["dim"] == 16
    assert doc["train"]["learning_rate"] == 1e-3
    assert doc["seed"] == 7


def test_flag_overrides_config_file(tmp_path, data_dir):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"dim": 32, "heads": 2, "seed": 1}))
    out = tmp_path / "prec"
    args = ["vocab", "--config", str(cfg_file), "--out", str(out),
            "--schema", str(data_dir / "schema.txt"),
            "--nodes", str(data_dir / "nodes.tsv"),
            "--edges", str(data_dir / "edges.tsv"),
            "--dim", "16"]
    assert cli.main(args) == 0
    doc = json.loads((out / "resolved_config.json").read_text())
    assert doc["model"]["dim"] == 16      # flag beats file
    assert doc["model"]["heads"] == 2     # file beats default
    assert doc["seed"] == 1


def test_env_seed_fallback(tmp_path, data_dir, monkeypatch):
    monkeypatch.setenv("HETERFORMER_SEED", "123")
    out = tmp_path / "env"
    args = ["vocab", "--out", str(out),
            "--schema", str(data_dir / "schema.txt"),
            "--nodes", str(data_dir / "nodes.tsv"),
            "--edges", str(data_dir / "edges.tsv")]
    assert cli.main(args) == 0
    doc = json.loads((out / "resolved_config.json").read_text())
    assert doc["seed"] == 123


def test_embed_and_retrieve(tmp_path, data_dir):
    out = tmp_path / "emb"
    assert cli.main(["embed"] + base_args(data_dir, out)) == 0
    ids, embs = read_embeddings(out / "embeddings.tsv")
    assert embs.shape[1] == 16
    assert any(i.startswith("d") for i in ids)
    assert any(i.startswith("creator") for i in ids)

    rc = cli.main(["retrieve", "--query", "w0001 w0002", "-k", "2"]
                  + base_args(data_dir, out))
    assert rc == 0


def test_benchmark_csv(tmp_path):
    out = tmp_path / "bench"
    assert cli.main(["benchmark", "--out", str(out),
                     "--bench-n", "4,8", "--repeats", "1"]) == 0
    lines = (out / "bench.csv").read_text().splitlines()
    assert lines[0] == "variant,P,M,N,seconds"
    assert len(lines) == 1 + 2 * 3


def test_missing_file_is_clean_error(tmp_path, capsys):
    rc = cli.main(["vocab", "--schema", "/no/such/file",
                   "--nodes", "/none", "--edges", "/none",
                   "--out", str(tmp_path / "x")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_train_reproducible(tmp_path, data_dir):
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert cli.main(["train"] + base_args(data_dir, out1)) == 0
    assert cli.main(["train"] + base_args(data_dir, out2)) == 0
    assert (out1 / "trace.csv").read_bytes() == (out2 / "trace.csv").read_bytes()
    assert (out1 / "model.ckpt").read_bytes() == (out2 / "model.ckpt").read_bytes()
