import numpy as np

from heterformer import bench


def test_run_benchmark_rows():
    rows = bench.run_benchmark(p=8, m=2, n_values=(4, 8), dim=8, dz=8,
                               repeats=1, seed=0)
    assert len(rows) == 2 * 3
    variants = {r[0] for r in rows}
    assert variants == {"nested", "cascaded", "concat"}
    assert all(r[4] > 0 for r in rows)


def test_fitted_slope_on_synthetic_times():
    # times proportional to N^2 must fit slope 2
    rows = [("concat", 8, 2, n, float(n) ** 2) for n in (4, 8, 16, 32)]
    assert abs(bench.fitted_slope(rows, "concat") - 2.0) < 1e-9


def test_write_csv(tmp_path):
    rows = [("nested", 8, 2, 4, 0.001), ("concat", 8, 2, 4, 0.002)]
    path = tmp_path / "bench.csv"
    bench.write_csv(rows, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "variant,P,M,N,seconds"
    assert lines[1].startswith("nested,8,2,4,")


def test_concat_cost_grows_quadratically_in_sequence_length():
    # structural check without timing: the concat workload's sequence length
    # grows linearly in N, so its score matrix grows quadratically
    w4 = bench._Workload(8, 2, 4, 8, 8, np.random.default_rng(0))
    w8 = bench._Workload(8, 2, 8, 8, 8, np.random.default_rng(0))
    assert w8.concat().shape[0] - w8.seqs.shape[0] * 8 == 8 * 8
    assert w8.concat().shape[0] > w4.concat().shape[0]
