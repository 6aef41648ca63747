import csv
import io
import json

import numpy as np
import pytest

from crossedcg.cli import SCHEMAS, ConfigError, ExperimentConfig, load_config, main, run
from crossedcg.mmio import write_matrix_market
from crossedcg.sparse_core import SparseMat


def tridiagonal(p):
    M = np.diag(np.full(p, 4.0)) + np.diag(-np.ones(p - 1), 1) + np.diag(-np.ones(p - 1), -1)
    return SparseMat.from_dense(M)


def run_main(argv, capsys):
    rc = main(argv)
    out, err = capsys.readouterr()
    return rc, out, err


class TestConfig:
    def test_defaults_filled(self):
        cfg = ExperimentConfig("benchmark-fig1")
        assert cfg.params["grid"] == (50, 100, 200, 400)
        assert cfg.params["seed"] == 0

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            ExperimentConfig("table1", {"bogus": "1"})

    def test_bad_choice(self):
        with pytest.raises(ConfigError):
            ExperimentConfig("benchmark-fig1", {"scenario": "z"})

    def test_unknown_command(self):
        with pytest.raises(ConfigError):
            ExperimentConfig("plot")

    def test_ini_section(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[benchmark-fig1]\ngrid = 50, 100\nseed = 4\n")
        cfg = ExperimentConfig("benchmark-fig1", load_config(str(path), "benchmark-fig1"))
        assert cfg.params["grid"] == (50, 100) and cfg.params["seed"] == 4

    def test_ini_unknown_section(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[benchmark-fig1]\nseed = 1\n[other]\nx = 1\n")
        with pytest.raises(ConfigError):
            load_config(str(path), "benchmark-fig1")

    def test_every_schema_has_seed_and_output(self):
        for schema in SCHEMAS.values():
            assert "seed" in schema and "output" in schema


class TestCommands:
    def test_identity_solve(self, tmp_path, capsys):
        path = tmp_path / "I.mtx"
        write_matrix_market(SparseMat.identity(5), path)
        rc, out, _ = run_main(["solve", "--matrix", str(path)], capsys)
        assert rc == 0
        rep = json.loads(out)
        assert rep["iterations"] == 1 and rep["converged"]
        assert len(rep["residual_history"]) == 2

    def test_jacobi_solve_writes_solution(self, tmp_path, capsys):
        path = tmp_path / "T.mtx"
        write_matrix_market(tridiagonal(20), path)
        sol = tmp_path / "x.txt"
        rc, out, _ = run_main(["solve", "--matrix", str(path), "--preconditioner", "jacobi",
                               "--solution", str(sol), "--tol", "1e-12"], capsys)
        assert rc == 0
        x = np.loadtxt(sol)
        np.testing.assert_allclose(tridiagonal(20).to_dense() @ x, 1.0, atol=1e-10)

    def test_chol_tridiagonal(self, tmp_path, capsys):
        p = 30
        path = tmp_path / "T.mtx"
        write_matrix_market(tridiagonal(p), path)
        rc, out, _ = run_main(["chol", "--matrix", str(path), "--ordering", "natural", "--numeric", "true"], capsys)
        assert rc == 0
        rep = json.loads(out)
        assert rep["n_l_total"] == 2 * p - 1
        assert rep["relative_residual"] < 1e-12

    def test_malformed_matrix_market(self, tmp_path, capsys):
        path = tmp_path / "bad.mtx"
        path.write_text("%%MatrixMarket matrix coordinate real general\n2 2 1\n1 q 1.0\n")
        rc, _, err = run_main(["solve", "--matrix", str(path)], capsys)
        assert rc == 2
        assert "line 3" in err

    def test_empty_grid(self, capsys):
        rc, _, err = run_main(["benchmark-fig1", "--grid", ""], capsys)
        assert rc == 2 and "empty" in err

    def test_unknown_ini_key(self, tmp_path, capsys):
        path = tmp_path / "c.ini"
        path.write_text("[table1]\nfoo = 3\n")
        rc, _, err = run_main(["table1", "--config", str(path)], capsys)
        assert rc == 2 and "foo" in err

    def test_cap_enforced_and_overridable(self, tmp_path, capsys):
        path = tmp_path / "T.mtx"
        write_matrix_market(tridiagonal(30), path)
        rc, _, err = run_main(["chol", "--matrix", str(path), "--max-p", "10"], capsys)
        assert rc == 2 and "--max-p" in err
        rc, _, _ = run_main(["chol", "--matrix", str(path), "--max-p", "30"], capsys)
        assert rc == 0

    def test_benchmark_manifest(self, tmp_path, capsys):
        out = tmp_path / "fig1.csv"
        rc, _, _ = run_main(["benchmark-fig1", "--grid", "50,100,200", "--output", str(out), "--seed", "2"], capsys)
        assert rc == 0
        rows = list(csv.DictReader(out.open()))
        assert [int(r["G"]) for r in rows] == [50, 100, 200]
        manifest = json.loads((tmp_path / "fig1.csv.manifest.json").read_text())
        assert manifest["command"] == "benchmark-fig1"
        assert manifest["params"]["seed"] == 2
        assert {"python", "numpy", "scipy"} <= set(manifest["versions"])
        assert "chol_slope" in manifest["summary"]

    def test_deterministic(self, tmp_path, capsys):
        texts = []
        for i in range(2):
            out = tmp_path / f"g{i}.csv"
            main(["gibbs", "--N", "500", "--sweeps", "12", "--burnin", "2", "--seed", "3", "--output", str(out)])
            texts.append(out.read_text())
        capsys.readouterr()
        assert texts[0] == texts[1]

    def test_spectrum_counts_sum_to_p(self, tmp_path, capsys):
        design = tmp_path / "d.txt"
        design.write_text("1 4 4\n1\n2\n3\n4\n")
        rc, out, _ = run_main(["spectrum", "--design-file", str(design)], capsys)
        assert rc == 0
        rows = [r for r in csv.DictReader(io.StringIO(out)) if r["panel"] == "Q"]
        assert sum(int(r["count"]) for r in rows) == 5

    def test_sample_draws(self, tmp_path, capsys):
        path = tmp_path / "V.mtx"
        write_matrix_market(SparseMat.from_dense([[1.0, 1.0]]), path)
        rc, out, _ = run_main(["sample", "--matrix", str(path), "--draws", "3", "--method", "cholesky"], capsys)
        assert rc == 0
        assert np.loadtxt(io.StringIO(out), delimiter=",").shape == (3, 2)

    def test_table1_run(self):
        result, manifest = run(ExperimentConfig("table1", {"G1": "40", "G2": "40,400"}))
        rows = list(csv.DictReader(io.StringIO(result.text)))
        assert len(rows) == 2
        assert int(rows[1]["iterations_jacobi"]) <= int(rows[1]["iterations_plain"])
