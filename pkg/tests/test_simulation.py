import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labelshift.estimators import MEAN, Estimand, EstimatorConfig
from labelshift.simulation import (
    ESTIMATORS,
    MetricsRow,
    SimConfig,
    StudyError,
    emit_table,
    parse_estimators,
    parse_table,
    replicate_seed,
    run_replicate,
    run_study,
    summarize,
    write_raw,
)

FAST = EstimatorConfig(solver={"tol": 1e-8, "max_iter": 100_000})
CHEAP = ("oracle", "shift-dependent*", "shift-dependent0", "doubly-flexible0")


def _config(**kw):
    base = dict(n=120, replicates=3, seed=5, estimators=CHEAP, estimands=(MEAN,), estimator_config=FAST)
    base.update(kw)
    return SimConfig(**base)


def _raw(thetas, truth=1.0, half=0.1, est="e", label="mean"):
    return [{"rep": i, "estimator": est, "estimand": label, "truth": truth, "theta": t, "se": half / 2,
             "ci_lo": t - half, "ci_hi": t + half, "error": ""} for i, t in enumerate(thetas)]


class TestConfig:
    def test_parse_estimators(self):
        assert parse_estimators("all") == ESTIMATORS
        assert parse_estimators(" oracle , shift-dependent* ") == ("oracle", "shift-dependent*")
        with pytest.raises(ValueError):
            parse_estimators("oracle,magic")
        with pytest.raises(ValueError):
            parse_estimators(",")

    @pytest.mark.parametrize("kw", [dict(replicates=0), dict(estimators=()), dict(estimands=()),
                                    dict(misspecified_outcome="guess"), dict(workers=0)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            _config(**kw)

    def test_replicate_seeds_distinct_and_stable(self):
        seeds = [replicate_seed(1, r) for r in range(50)]
        assert len(set(seeds)) == 50
        assert replicate_seed(1, 7) == replicate_seed(1, 7)
        assert replicate_seed(1, 7) != replicate_seed(2, 7)


class TestSummarize:
    def test_mse_decomposition(self):
        thetas = np.random.default_rng(0).normal(1.1, 0.2, size=40)
        (row,) = summarize(_raw(thetas), ["e"], ["mean"])
        assert row.mse == pytest.approx(row.bias ** 2 + row.se ** 2, rel=1e-12)
        assert row.bias == pytest.approx(thetas.mean() - 1.0)
        assert row.se == pytest.approx(thetas.std(ddof=0))

    def test_coverage_and_se_hat(self):
        (row,) = summarize(_raw([0.95, 1.05, 1.5, 0.5]), ["e"], ["mean"])
        assert row.coverage == 0.5
        assert row.se_hat_mean == pytest.approx(0.05)

    def test_single_replicate(self):
        (row,) = summarize(_raw([1.2]), ["e"], ["mean"])
        assert row.se == 0.0 and row.mse == pytest.approx(0.04) and row.replicates == 1

    def test_failures_excluded(self):
        raw = _raw([1.0, 2.0])
        raw[1].update(theta=math.nan, error="DivergenceError: boom")
        (row,) = summarize(raw, ["e"], ["mean"])
        assert (row.replicates, row.failures, row.bias) == (1, 1, 0.0)

    def test_all_failed(self):
        raw = _raw([1.0])
        raw[0]["error"] = "x"
        (row,) = summarize(raw, ["e"], ["mean"])
        assert math.isnan(row.bias) and row.failures == 1

    def test_missing_intervals_give_nan_coverage(self):
        raw = _raw([1.0, 1.1])
        raw[0]["ci_lo"] = math.nan
        (row,) = summarize(raw, ["e"], ["mean"])
        assert math.isnan(row.coverage)

    @settings(max_examples=30, deadline=None)
    @given(st.permutations(list(range(8))))
    def test_order_invariance(self, perm):
        raw = _raw(np.linspace(0.5, 1.6, 8))
        shuffled = [raw[i] for i in perm]
        assert summarize(shuffled, ["e"], ["mean"]) == summarize(raw, ["e"], ["mean"])


class TestTables:
    ROWS = [MetricsRow("oracle", "mean", 0.002, -0.00004, 0.0451, 0.045, 0.95, 200, 0),
            MetricsRow("doubly-flexible*", "quantile:0.5", 0.01, 0.0013, 0.1, math.nan, 0.9437, 199, 1)]

    @pytest.mark.parametrize("fmt", ["csv", "markdown"])
    def test_round_trip(self, fmt):
        back = parse_table(emit_table(self.ROWS, fmt), fmt)
        for a, b in zip(back, self.ROWS):
            assert (a.estimator, a.estimand, a.replicates, a.failures) == (b.estimator, b.estimand,
                                                                          b.replicates, b.failures)
            np.testing.assert_allclose([a.mse, a.bias, a.se, a.coverage], [b.mse, b.bias, b.se, b.coverage],
                                       atol=5e-5)
            assert math.isnan(a.se_hat_mean) == math.isnan(b.se_hat_mean)

    def test_four_decimals(self):
        text = emit_table(self.ROWS[:1])
        assert text.splitlines()[1] == "oracle,mean,0.0020,-0.0000,0.0451,0.0450,0.9500,200,0"

    def test_empty_table_is_header_only(self):
        assert emit_table([]) == "estimator,estimand,mse,bias,se,se_hat,ci,replicates,failures\n"
        assert parse_table(emit_table([])) == []

    def test_bad_format_and_header(self):
        with pytest.raises(ValueError):
            emit_table(self.ROWS, "xml")
        with pytest.raises(ValueError):
            parse_table("a,b\n")

    def test_raw_floats_round_trip(self):
        buf = io.StringIO()
        write_raw(_raw([0.1 + 0.2]), buf)
        line = buf.getvalue().splitlines()[1].split(",")
        assert float(line[4]) == 0.1 + 0.2


@pytest.fixture(scope="module")
def study():
    return run_study(_config())


class TestStudy:
    def test_deterministic(self, study):
        again = run_study(_config())
        assert emit_table(again.rows) == emit_table(study.rows)
        buf1, buf2 = io.StringIO(), io.StringIO()
        write_raw(study.raw, buf1)
        write_raw(again.raw, buf2)
        assert buf1.getvalue() == buf2.getvalue()

    def test_seed_changes_results(self, study):
        assert emit_table(run_study(_config(seed=6)).rows) != emit_table(study.rows)

    def test_shape_and_metadata(self, study):
        assert [r.estimator for r in study.rows] == list(CHEAP)
        assert len(study.raw) == 3 * len(CHEAP)
        assert study.metadata["variance_divisor"] == "R"
        assert all(r.failures == 0 and r.replicates == 3 for r in study.rows)

    def test_replicate_matches_study(self, study):
        rep = run_replicate(_config(), 1)
        rec = next(r for r in study.raw if r["rep"] == 1 and r["estimator"] == "oracle")
        assert rep[("oracle", "mean")].theta == rec["theta"]
        assert rep["truth"]["mean"] == 1.0

    def test_median_truth(self):
        rep = run_replicate(_config(estimators=("oracle",), estimands=(Estimand.quantile(0.5),)), 0)
        assert rep["truth"]["quantile:0.5"] == pytest.approx(1.0)

    def test_prefix_stability(self, study):
        # replicate k draws the same data whatever the replicate count
        two = run_study(_config(replicates=2))
        assert two.raw == [r for r in study.raw if r["rep"] < 2]

    def test_failure_threshold(self):
        bad = EstimatorConfig(solver={"tol": 1e-8, "max_iter": 100, "step": 1e6})
        with pytest.raises(StudyError, match="failed"):
            run_study(_config(estimators=("doubly-flexible0",), estimator_config=bad, replicates=2))

    def test_workers_do_not_change_results(self, study):
        parallel = run_study(_config(workers=2))
        assert parallel.raw == study.raw
