import json

import numpy as np
import pytest
from click.testing import CliRunner

from helpers import planted_rank_views
from sifa import io as sio
from sifa.cli import EXIT_INVALID, EXIT_IO, EXIT_NOT_CONVERGED, cli


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def simdir(runner, tmp_path):
    out = tmp_path / "sim"
    res = runner.invoke(cli, ["simulate", "--setting", "3", "--n", "80", "--p", "20,15",
                              "--ranks", "1,1,1", "--seed", "3", "--out", str(out)])
    assert res.exit_code == 0, res.output
    return out


def _fit_args(simdir, out, *extra):
    return ["fit", "--views", f"{simdir / 'y1.csv'},{simdir / 'y2.csv'}",
            "--covariates", str(simdir / "x.csv"), "--ranks", "1,1,1", "--out", str(out), *extra]


def test_simulate_files_and_determinism(runner, simdir, tmp_path):
    names = {p.name for p in simdir.iterdir()}
    assert {"y1.csv", "y2.csv", "x.csv", "truth.json", "provenance.json", "signal.csv"} <= names
    again = tmp_path / "again"
    runner.invoke(cli, ["simulate", "--setting", "3", "--n", "80", "--p", "20,15",
                        "--ranks", "1,1,1", "--seed", "3", "--out", str(again)])
    for name in names:
        assert (simdir / name).read_bytes() == (again / name).read_bytes(), name


def test_fit_then_metrics(runner, simdir, tmp_path):
    out = tmp_path / "fit.json"
    res = runner.invoke(cli, _fit_args(simdir, out, "--mode", "general"))
    assert res.exit_code == 0, res.output
    assert "SIFA-A" in res.output
    doc = sio.read_json(out, sio.FIT_SCHEMA)
    assert doc["label"] == "SIFA-A"
    table = tmp_path / "m.tsv"
    res = runner.invoke(cli, ["metrics", "--report", str(out), "--truth", str(simdir / "truth.json"),
                              "--views", f"{simdir / 'y1.csv'},{simdir / 'y2.csv'}",
                              "--covariates", str(simdir / "x.csv"), "--baseline", "pca",
                              "--out", str(tmp_path / "m.json"), "--table", str(table)])
    assert res.exit_code == 0, res.output
    m = sio.read_json(tmp_path / "m.json", sio.METRICS_SCHEMA)
    assert m["recovery_error"] < m["pca_recovery_error"]
    assert "view1" in m["variance"]
    assert table.read_text().splitlines()[1] == "metric\tvalue"


def test_fit_is_deterministic(runner, simdir, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    runner.invoke(cli, _fit_args(simdir, a, "--max-iters", "20"))
    runner.invoke(cli, _fit_args(simdir, b, "--max-iters", "20"))
    da, db = json.loads(a.read_text()), json.loads(b.read_text())
    da.pop("elapsed_seconds"), db.pop("elapsed_seconds")
    assert da == db


def test_jive_without_covariates(runner, simdir, tmp_path):
    res = runner.invoke(cli, ["fit", "--views", str(simdir / "y1.csv"), "--views", str(simdir / "y2.csv"),
                              "--ranks", "1,1,1", "--out", str(tmp_path / "j.json")])
    assert res.exit_code == 0, res.output
    assert "JIVE" in res.output


def test_truth_against_itself(runner, simdir):
    res = runner.invoke(cli, ["metrics", "--report", str(simdir / "truth.json"),
                              "--truth", str(simdir / "truth.json")])
    assert res.exit_code == 0, res.output
    vals = dict(line.split("\t") for line in res.output.strip().splitlines())
    assert float(vals["max_principal_angle"]) < 1e-6
    assert float(vals["recovery_error"]) < 1e-6


def test_strict_nonconvergence_exit(runner, simdir, tmp_path):
    res = runner.invoke(cli, _fit_args(simdir, tmp_path / "f.json", "--max-iters", "1", "--tol", "1e-15",
                                       "--strict"))
    assert res.exit_code == EXIT_NOT_CONVERGED
    assert (tmp_path / "f.json").exists()


def test_normalize_requires_general(runner, simdir, tmp_path):
    res = runner.invoke(cli, _fit_args(simdir, tmp_path / "f.json", "--normalize", "frobenius"))
    assert res.exit_code == EXIT_INVALID
    res = runner.invoke(cli, _fit_args(simdir, tmp_path / "f.json", "--normalize", "frobenius",
                                       "--mode", "general"))
    assert res.exit_code == 0, res.output


def test_invalid_ranks_exit(runner, simdir, tmp_path):
    res = runner.invoke(cli, ["fit", "--views", f"{simdir / 'y1.csv'},{simdir / 'y2.csv'}",
                              "--ranks", "30,1,1", "--out", str(tmp_path / "f.json")])
    assert res.exit_code == EXIT_INVALID
    res = runner.invoke(cli, ["fit", "--views", str(simdir / "y1.csv"), "--ranks", "x",
                              "--out", str(tmp_path / "f.json")])
    assert res.exit_code == EXIT_INVALID


def test_missing_file_exit(runner, tmp_path):
    res = runner.invoke(cli, ["fit", "--views", str(tmp_path / "nope.csv"), "--ranks", "0,1",
                              "--out", str(tmp_path / "f.json")])
    assert res.exit_code == EXIT_IO


def test_config_file(runner, simdir, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("mode: general\nmax_iters: 3\n")
    out = tmp_path / "f.json"
    res = runner.invoke(cli, _fit_args(simdir, out, "--config", str(cfg)))
    assert res.exit_code == 0, res.output
    doc = sio.read_json(out)
    assert doc["options"]["mode"] == "general" and doc["iterations"] <= 3
    bad = tmp_path / "bad.yaml"
    bad.write_text("modes: general\n")
    res = runner.invoke(cli, _fit_args(simdir, out, "--config", str(bad)))
    assert res.exit_code == EXIT_INVALID
    assert "modes" in res.output


def test_rank_signal_ranks(runner, tmp_path):
    out = tmp_path / "r.json"
    res = runner.invoke(cli, ["rank", "--signal-ranks", "76:50,31,46", "--out", str(out)])
    assert res.exit_code == 0, res.output
    assert "ranks 26,24,5,20" in res.output
    assert sio.read_json(out, sio.RANK_SCHEMA)["ranks"] == [26, 24, 5, 20]
    assert runner.invoke(cli, ["rank", "--signal-ranks", "76-50"]).exit_code == EXIT_INVALID


def test_rank_threshold_and_lcv(runner, simdir, tmp_path):
    views = f"{simdir / 'y1.csv'},{simdir / 'y2.csv'}"
    res = runner.invoke(cli, ["rank", "--views", views, "--threshold", "0.5"])
    assert res.exit_code == 0, res.output
    res = runner.invoke(cli, ["rank", "--views", views, "--covariates", str(simdir / "x.csv"), "--lcv",
                              "--candidates", "1,1,1;0,1,1", "--folds", "3", "--max-iters", "30",
                              "--out", str(tmp_path / "l.json")])
    assert res.exit_code == 0, res.output
    doc = sio.read_json(tmp_path / "l.json")
    assert len(doc["means"]) == 2 and doc["folds"] == 3
    assert runner.invoke(cli, ["rank", "--views", views, "--lcv"]).exit_code == EXIT_INVALID


def test_bench(runner, tmp_path):
    res = runner.invoke(cli, ["bench", "--sizes", "40,10,10,3", "--repeats", "1", "--kernels",
                              "--out", str(tmp_path / "b.json"), "--table", str(tmp_path / "b.csv")])
    assert res.exit_code == 0, res.output
    doc = sio.read_json(tmp_path / "b.json", sio.BENCH_SCHEMA)
    assert {f["mode"] for f in doc["fits"]} == {"orthogonal", "general"}
    assert doc["kernels"]
    assert runner.invoke(cli, ["bench", "--modes", "fast"]).exit_code == EXIT_INVALID


def test_threads_option(runner, tmp_path):
    res = runner.invoke(cli, ["rank", "--signal-ranks", "5:3,3", "--threads", "1"])
    assert res.exit_code == 0, res.output


def test_version(runner):
    res = runner.invoke(cli, ["--version"])
    assert res.exit_code == 0 and "sifa" in res.output


def test_matrix_files_are_readable(simdir):
    Y, _ = sio.read_matrix(simdir / "y1.csv")
    assert Y.shape == (80, 20)
    np.testing.assert_allclose(Y.mean(axis=0), 0, atol=1e-10)


def test_rank_threshold_planted_gtex_shape(runner, tmp_path):
    paths = []
    for k, Y in enumerate(planted_rank_views(), start=1):
        paths.append(str(tmp_path / f"v{k}.csv"))
        sio.write_matrix(paths[-1], Y)
    out = tmp_path / "r.json"
    res = runner.invoke(cli, ["rank", "--views", ",".join(paths), "--threshold", "0.9", "--out", str(out)])
    assert res.exit_code == 0, res.output
    doc = sio.read_json(out)
    assert doc["signal_ranks"] == [50, 31, 46] and doc["combined_rank"] == 76
    assert doc["ranks"] == [26, 24, 5, 20] and doc["rounded"]
