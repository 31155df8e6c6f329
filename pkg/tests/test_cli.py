import json
import os

import numpy as np
import pytest

from labelshift.cli import (
    EXIT_FAILURE,
    EXIT_OK,
    EXIT_USAGE,
    UsageError,
    _atomic_write,
    main,
    parse_args,
    parse_rho,
    parse_se,
)
from labelshift.models import ExpTilt
from labelshift.sampling import generate_paper_design, write_csv

FAST_SIM = ["simulate", "--n", "120", "--replicates", "2", "--seed", "3", "--estimators",
            "oracle,shift-dependent*,doubly-flexible0", "--targets", "mean", "--tol", "1e-8"]


@pytest.fixture(scope="module")
def sample_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "sample.csv"
    with open(path, "w", newline="") as fh:
        write_csv(generate_paper_design(300, 4).sample, fh)
    return str(path)


class TestParsing:
    @pytest.mark.parametrize("text, tilt", [
        ("exp(-0.7+1.2*y)", ExpTilt(-0.7, 1.2)),
        ("exp(-0.5 + y)", ExpTilt(-0.5, 1.0)),
        ("exp(2y)", ExpTilt(0.0, 2.0)),
        ("exp(1e-1-y)", ExpTilt(0.1, -1.0)),
        ("exp(.5)", ExpTilt(0.5, 0.0)),
    ])
    def test_rho(self, text, tilt):
        assert parse_rho(text) == tilt

    @pytest.mark.parametrize("text", ["exp()", "y+1", "exp(y^2)", "exp(1+*y)", "exp(a+b*y)"])
    def test_rho_errors(self, text):
        with pytest.raises(UsageError):
            parse_rho(text)

    def test_se(self):
        assert parse_se("plugin") == ("plugin", 0)
        assert parse_se("bootstrap") == ("bootstrap", 200)
        assert parse_se("Bootstrap:50") == ("bootstrap", 50)
        for bad in ("bootstrap:5", "bootstrap:x", "jackknife"):
            with pytest.raises(UsageError):
                parse_se(bad)

    def test_defaults(self):
        cfg = parse_args(["simulate"])
        assert (cfg["n"], cfg["replicates"], cfg["seed"], cfg["targets"]) == (1000, 200, 1, "mean,quantile:0.5")
        assert cfg["bandwidth_scale"] == 2.5 and cfg["m"] == 50
        assert parse_args(["solve-fredholm"])["tol"] == 1e-8

    def test_config_file_then_flags(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"n": 500, "replicates": 7, "bandwidth-scale": 3.0}))
        cfg = parse_args(["simulate", "--config", str(path), "--n", "250"])
        assert (cfg["n"], cfg["replicates"], cfg["bandwidth_scale"]) == (250, 7, 3.0)

    def test_unknown_config_key(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"nn": 5}))
        with pytest.raises(UsageError, match="nn"):
            parse_args(["simulate", "--config", str(path)])

    def test_unreadable_config(self, tmp_path):
        with pytest.raises(UsageError):
            parse_args(["simulate", "--config", str(tmp_path / "missing.json")])

    @pytest.mark.parametrize("argv", [[], ["simulate", "--bogus"], ["estimate", "--estimator", "triple"],
                                      ["simulate", "--n", "ten"]])
    def test_usage_exit(self, argv, capsys):
        assert main(argv) == EXIT_USAGE
        assert "usage error" in capsys.readouterr().err


class TestAtomicWrite:
    def test_replaces_whole_file(self, tmp_path):
        path = tmp_path / "out.txt"
        path.write_text("old contents that are longer")
        _atomic_write(str(path), "new")
        assert path.read_text() == "new"
        assert os.listdir(tmp_path) == ["out.txt"]

    def test_stdout(self, capsys):
        _atomic_write(None, "hello\n")
        assert capsys.readouterr().out == "hello\n"


class TestGlNodes:
    def test_two_points(self, capsys):
        assert main(["gl-nodes", "--m", "2", "--a", "-1", "--b", "1"]) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "node,weight"
        nodes = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
        np.testing.assert_allclose(nodes, [[-1 / np.sqrt(3), 1.0], [1 / np.sqrt(3), 1.0]], rtol=1e-15)

    def test_bad_interval(self):
        assert main(["gl-nodes", "--a", "1", "--b", "0"]) == EXIT_USAGE


class TestSolveFredholm:
    def _files(self, tmp_path, seed=0):
        rng = np.random.default_rng(seed)
        phi, y = rng.normal(size=(20, 15)), rng.normal(size=20)
        np.savetxt(tmp_path / "phi.csv", phi, delimiter=",")
        np.savetxt(tmp_path / "y.csv", y, delimiter=",")
        return phi, y

    def test_matches_lstsq(self, tmp_path):
        phi, y = self._files(tmp_path)
        out, diag = tmp_path / "a.csv", tmp_path / "d.json"
        code = main(["solve-fredholm", "--phi", str(tmp_path / "phi.csv"), "--target", str(tmp_path / "y.csv"),
                     "--tol", "1e-20", "--max-iter", "100000", "--spectral-guard", "--out", str(out),
                     "--diag", str(diag)])
        assert code == EXIT_OK
        a = np.loadtxt(out)
        np.testing.assert_allclose(a, np.linalg.lstsq(phi, y, rcond=None)[0], atol=1e-6)
        d = json.loads(diag.read_text())
        assert d["schema_version"] == 1 and d["converged"]

    def test_divergence_exit(self, tmp_path, capsys):
        phi, _ = self._files(tmp_path, 1)
        step = 10.0 / np.linalg.norm(phi, 2) ** 2
        code = main(["solve-fredholm", "--phi", str(tmp_path / "phi.csv"), "--target", str(tmp_path / "y.csv"),
                     "--step", repr(float(step))])
        assert code == EXIT_FAILURE
        assert "diverged" in capsys.readouterr().err

    def test_missing_input(self, tmp_path):
        assert main(["solve-fredholm", "--target", str(tmp_path / "y.csv")]) == EXIT_USAGE


class TestEstimate:
    @pytest.mark.parametrize("estimator", ["shift-dependent", "doubly", "singly"])
    def test_mean_json(self, sample_csv, tmp_path, estimator):
        out = tmp_path / "r.json"
        assert main(["estimate", "--input", sample_csv, "--estimator", estimator, "--out", str(out)]) == EXIT_OK
        res = json.loads(out.read_text())
        assert res["schema_version"] == 1 and res["estimator"].startswith(estimator)
        assert res["n"] == 300 and 0 < res["pi"] < 1 and res["method"] == "plugin"
        assert res["ci"][0] < res["theta"] < res["ci"][1]
        assert abs(res["theta"] - 1.0) < 0.6

    def test_quantile_with_bootstrap(self, sample_csv, capsys):
        argv = ["estimate", "--input", sample_csv, "--estimator", "shift-dependent", "--target", "quantile:0.5",
                "--se", "bootstrap:20", "--seed", "9"]
        assert main(argv) == EXIT_OK
        first = capsys.readouterr().out
        assert main(argv) == EXIT_OK
        assert capsys.readouterr().out == first
        assert json.loads(first)["method"] == "bootstrap"

    def test_cond_only_for_doubly(self, sample_csv):
        assert main(["estimate", "--input", sample_csv, "--estimator", "singly", "--cond", "fit-gaussian"]) == EXIT_USAGE

    def test_needs_input(self):
        assert main(["estimate"]) == EXIT_USAGE

    def test_missing_file(self, tmp_path):
        assert main(["estimate", "--input", str(tmp_path / "none.csv")]) == EXIT_USAGE

    def test_bad_schema(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("r,y,x1\n1,,0.5\n0,,0.1\n")
        assert main(["estimate", "--input", str(path), "--estimator", "shift-dependent"]) == EXIT_FAILURE

    def test_divergent_step(self, sample_csv, capsys):
        assert main(["estimate", "--input", sample_csv, "--step", "1e6"]) == EXIT_FAILURE
        assert "diverged" in capsys.readouterr().err


class TestSimulate:
    def test_byte_identical(self, tmp_path):
        outs = []
        for k in range(2):
            files = [tmp_path / f"{name}{k}" for name in ("t.csv", "raw.csv", "meta.json")]
            argv = FAST_SIM + ["--out", str(files[0]), "--raw", str(files[1]), "--meta", str(files[2])]
            assert main(argv) == EXIT_OK
            outs.append([f.read_bytes() for f in files])
        assert outs[0] == outs[1]
        assert outs[0][0].startswith(b"estimator,estimand,mse,bias,se,se_hat,ci,replicates,failures\n")
        assert json.loads(outs[0][2])["variance_divisor"] == "R"

    def test_markdown(self, capsys):
        assert main(FAST_SIM + ["--format", "markdown"]) == EXIT_OK
        assert capsys.readouterr().out.startswith("| estimator |")

    def test_threads_env_validated(self, monkeypatch):
        monkeypatch.setenv("LABELSHIFT_THREADS", "many")
        assert main(FAST_SIM) == EXIT_USAGE

    @pytest.mark.parametrize("extra", [["--estimators", "oracle,nope"], ["--bandwidth", "0.3"],
                                       ["--kernel", "epanechnikov"], ["--targets", "quantile:2"]])
    def test_rejected_options(self, extra):
        assert main(FAST_SIM + extra) == EXIT_USAGE
