import csv

import numpy as np
import pytest

from splitlm import network
from splitlm.cli import BENCH_HEADER, SUMMARY_HEADER, loglog_slope, main
from splitlm.network import generate_problem
from splitlm.solver import LOG_HEADER


@pytest.fixture
def separable_file(tmp_path):
    p = network.disjoint_union(generate_problem(30, 1), generate_problem(30, 2))
    path = tmp_path / "sep.txt"
    network.write_problem(p, path)
    return path


def test_generate_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    assert main(["generate", "--n", "100", "--seed", "7", "--out", str(a)]) == 0
    assert main(["generate", "--n", "100", "--seed", "7", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    prob = network.read_problem(a)
    assert prob.n_points == 100 and prob.n_obs >= 200
    assert "average_degree" in capsys.readouterr().out


def test_generate_rejects_small_n(tmp_path):
    assert main(["generate", "--n", "4", "--out", str(tmp_path / "x.txt")]) == 2


def test_usage_errors():
    assert main([]) == 2
    assert main(["solve"]) == 2
    assert main(["bench", "--sizes", "100", "--ks", "4,2", "--out-csv", "x"]) == 2


def test_missing_file_is_io_failure(tmp_path):
    assert main(["solve", "--problem", str(tmp_path / "nope.txt")]) == 4


def test_malformed_file_is_failure(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("not a problem\n", encoding="utf-8")
    assert main(["solve", "--problem", str(bad)]) == 4


def test_solve_writes_log(tmp_path, capsys):
    prob = tmp_path / "p.txt"
    main(["generate", "--n", "120", "--seed", "3", "--out", str(prob)])
    log = tmp_path / "log.csv"
    code = main(["solve", "--problem", str(prob), "--k", "2", "--log", str(log)])
    out = capsys.readouterr().out
    assert code == 0 and "status=Converged" in out
    lines = log.read_text(encoding="utf-8").splitlines()
    assert lines[0] == LOG_HEADER
    rows = list(csv.DictReader(lines, strict=True))
    assert len(rows) >= 1


def test_solve_separable_reports_zero_coupling(separable_file, capsys):
    assert main(["solve", "--problem", str(separable_file), "--k", "2"]) == 0
    out = capsys.readouterr().out
    assert "phi=0.0 " in out and "cut_fraction=0.0000" in out


def test_solve_not_converged_exit_code(tmp_path):
    prob = tmp_path / "p.txt"
    main(["generate", "--n", "120", "--seed", "3", "--out", str(prob)])
    assert main(["solve", "--problem", str(prob), "--max-iters", "1"]) == 3


def test_partition_stats_cut_fraction(separable_file, tmp_path, capsys):
    assert main(["partition-stats", "--problem", str(separable_file), "--k", "1"]) == 0
    assert "cut_fraction=0.000000" in capsys.readouterr().out
    assert main(["partition-stats", "--problem", str(separable_file), "--k", "2"]) == 0
    out = capsys.readouterr().out
    assert "cut_fraction=0.000000" in out and "M_hat=0" in out


def test_partition_stats_generated_cut_below_quarter(tmp_path, capsys):
    prob = tmp_path / "p.txt"
    main(["generate", "--n", "1000", "--seed", "0", "--out", str(prob)])
    capsys.readouterr()
    assert main(["partition-stats", "--problem", str(prob), "--k", "8"]) == 0
    line = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("cut_fraction=")][0]
    assert float(line.split("=")[1]) < 0.25


def test_bench_rows_and_summary(tmp_path, capsys):
    out, summ = tmp_path / "bench.csv", tmp_path / "summary.csv"
    args = ["bench", "--sizes", "200", "--ks", "1,2", "--out-csv", str(out),
            "--summary-csv", str(summ)]
    assert main(args) == 0
    lines = out.read_text(encoding="utf-8").splitlines()
    assert lines[0] == BENCH_HEADER and len(lines) == 3
    rows = list(csv.DictReader(lines, strict=True))
    assert [r["K"] for r in rows] == ["1", "2"]
    assert all(r["status"] == "Converged" and r["beta_zero"] == "0" for r in rows)
    assert summ.read_text(encoding="utf-8").splitlines()[0] == SUMMARY_HEADER
    assert "loglog_slope_best_K" in capsys.readouterr().out

    # identical flags give identical content apart from the timing column
    again = tmp_path / "again.csv"
    main(args[:-4] + ["--out-csv", str(again)])
    drop = lambda text: [r[:7] + r[8:] for r in csv.reader(text.splitlines())]  # noqa: E731
    assert drop(again.read_text(encoding="utf-8")) == drop(out.read_text(encoding="utf-8"))


def test_bench_beta_zero_logs(tmp_path):
    logs = tmp_path / "logs"
    out = tmp_path / "bench.csv"
    assert main(["bench", "--sizes", "200", "--ks", "2,4", "--beta-zero", "--out-csv", str(out),
                 "--log-dir", str(logs)]) == 0
    files = sorted(logs.glob("*.csv"))
    assert len(files) == 2
    for f in files:
        rows = list(csv.DictReader(f.read_text(encoding="utf-8").splitlines()))
        assert rows and all(float(r["beta"]) == 0.0 for r in rows)
    rows = list(csv.DictReader(out.read_text(encoding="utf-8").splitlines()))
    assert all(r["beta_zero"] == "1" for r in rows)


def test_loglog_slope_oracle():
    xs = np.array([10.0, 20.0, 40.0, 80.0])
    assert loglog_slope(xs, 3.0 * xs ** 1.3) == pytest.approx(1.3, rel=1e-12)
    assert np.isnan(loglog_slope([1.0], [1.0]))


def test_module_entry_point():
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "splitlm", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "partition-stats" in res.stdout
