"""Monte Carlo replication of the simulation design.

Each replicate draws a fresh sample from :func:`generate_paper_design`,
re-normalizes the working ratio on it, refits the working outcome models and
runs the requested estimators.  :func:`run_study` folds the replicates in
index order, so the summary does not depend on how they were scheduled.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .estimators import (
    MEAN,
    Estimand,
    EstimateResult,
    EstimatorConfig,
    doubly_flexible,
    oracle,
    shift_dependent,
    singly_flexible,
)
from .models import (
    DensityRatioModel,
    ExpTilt,
    NonparamRegressor,
    fit_gaussian_linear,
    normalize_ratio,
    paper_features,
    paper_misspecified_model,
)
from .sampling import generate_paper_design

__all__ = [
    "ESTIMATORS",
    "SimConfig",
    "MetricsRow",
    "StudyResult",
    "StudyError",
    "parse_estimators",
    "replicate_seed",
    "run_replicate",
    "run_study",
    "summarize",
    "emit_table",
    "parse_table",
    "write_raw",
]

# "*" marks the misspecified ratio exp(-0.7 + 1.2 y) (and, for the doubly
# flexible estimator, the misspecified outcome family); "0" the true ratio.
ESTIMATORS = (
    "shift-dependent*",
    "doubly-flexible*",
    "singly-flexible*",
    "shift-dependent0",
    "doubly-flexible0",
    "singly-flexible0",
    "oracle",
)
MISSPECIFIED_TILT = ExpTilt(-0.7, 1.2)
TRUE_TILT = ExpTilt(-0.5, 1.0)
MAX_FAILURE_RATE = 0.05


class StudyError(RuntimeError):
    """More than 5% of the replicates failed for some estimator."""


def parse_estimators(text: str) -> tuple[str, ...]:
    """Comma-separated estimator ids, or ``all``."""
    if text.strip() == "all":
        return ESTIMATORS
    ids = tuple(part.strip() for part in text.split(",") if part.strip())
    unknown = [i for i in ids if i not in ESTIMATORS]
    if unknown or not ids:
        raise ValueError(f"unknown estimators {unknown}; choose from {', '.join(ESTIMATORS)} or all")
    return ids


@dataclass(frozen=True)
class SimConfig:
    """Settings of a Monte Carlo study.

    ``misspecified_outcome`` selects the doubly flexible working model:
    ``"fitted"`` refits the misspecified family by maximum likelihood on each
    replicate, ``"fixed"`` uses the published constants unchanged.
    """

    n: int = 1000
    replicates: int = 200
    seed: int = 1
    estimators: tuple[str, ...] = ESTIMATORS
    estimands: tuple[Estimand, ...] = (MEAN, Estimand.quantile(0.5))
    estimator_config: EstimatorConfig = field(default_factory=EstimatorConfig)
    p_source: float = 0.5
    bandwidth_scale: float = 2.5
    kernel_family: str = "gaussian"
    misspecified_outcome: str = "fitted"
    workers: int = 1

    def __post_init__(self):
        if int(self.replicates) != self.replicates or self.replicates < 1:
            raise ValueError("replicates must be a positive integer")
        if not self.estimators:
            raise ValueError("at least one estimator is required")
        parse_estimators(",".join(self.estimators))
        if not self.estimands:
            raise ValueError("at least one estimand is required")
        if self.misspecified_outcome not in ("fitted", "fixed"):
            raise ValueError("misspecified_outcome must be 'fitted' or 'fixed'")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")


@dataclass(frozen=True)
class MetricsRow:
    """Summary of one estimator and estimand over the successful replicates.

    ``se`` is the standard deviation of the estimates with divisor R, so
    ``mse == bias**2 + se**2``.
    """

    estimator: str
    estimand: str
    mse: float
    bias: float
    se: float
    se_hat_mean: float
    coverage: float
    replicates: int
    failures: int = 0


@dataclass
class StudyResult:
    rows: list[MetricsRow]
    raw: list[dict]
    metadata: dict


def replicate_seed(seed: int, rep_index: int) -> int:
    """64-bit seed for replicate ``rep_index``, from ``SeedSequence([seed, rep_index])``."""
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), int(rep_index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _estimate(est_id: str, syn, estimand: Estimand, config: SimConfig) -> EstimateResult:
    s = syn.sample
    ecfg = config.estimator_config
    if est_id == "oracle":
        return oracle(syn, estimand, ecfg)
    misspecified = est_id.endswith("*")
    ratio = normalize_ratio(MISSPECIFIED_TILT, s) if misspecified else DensityRatioModel(TRUE_TILT)
    if est_id.startswith("shift-dependent"):
        return shift_dependent(s, ratio, estimand, ecfg)
    if est_id.startswith("doubly-flexible"):
        if not misspecified:
            model = fit_gaussian_linear(s)
        elif config.misspecified_outcome == "fitted":
            model = fit_gaussian_linear(s, paper_features)
        else:
            model = paper_misspecified_model()
        return doubly_flexible(s, ratio, model, estimand, ecfg)
    regressor = NonparamRegressor.from_sample(s, config.bandwidth_scale, config.kernel_family)
    return singly_flexible(s, ratio, regressor, estimand, ecfg)


def run_replicate(config: SimConfig, rep_index: int) -> dict:
    """Results of every configured estimator on replicate ``rep_index``.

    Returns a mapping ``(estimator, estimand label) -> EstimateResult`` with an
    error message string in place of the result when that estimator failed.
    The key ``"truth"`` maps estimand labels to true values.
    """
    syn = generate_paper_design(config.n, replicate_seed(config.seed, rep_index), config.p_source)
    out: dict = {"truth": {}}
    for estimand in config.estimands:
        out["truth"][estimand.label] = (
            syn.theta_mean if estimand.is_mean else syn.theta_quantile(estimand.level)
        )
        for est_id in config.estimators:
            try:
                out[(est_id, estimand.label)] = _estimate(est_id, syn, estimand, config)
            except (ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
                out[(est_id, estimand.label)] = f"{type(exc).__name__}: {exc}"
    return out


def _run_one(args):
    config, rep = args
    return run_replicate(config, rep)


def run_study(config: SimConfig) -> StudyResult:
    """Run all replicates and summarize them.

    Raises
    ------
    StudyError
        When more than 5% of the replicates of some estimator failed.
    """
    reps = range(config.replicates)
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_run_one, [(config, r) for r in reps], chunksize=4))
    else:
        results = [run_replicate(config, r) for r in reps]
    raw = []
    for rep, res in enumerate(results):
        for estimand in config.estimands:
            label = estimand.label
            for est_id in config.estimators:
                item = res[(est_id, label)]
                row = {"rep": rep, "estimator": est_id, "estimand": label, "truth": res["truth"][label],
                       "theta": math.nan, "se": math.nan, "ci_lo": math.nan, "ci_hi": math.nan, "error": ""}
                if isinstance(item, EstimateResult):
                    row["theta"] = item.theta
                    row["se"] = math.nan if item.se is None else item.se
                    if item.ci is not None:
                        row["ci_lo"], row["ci_hi"] = item.ci
                else:
                    row["error"] = item
                raw.append(row)
    rows = summarize(raw, config.estimators, [e.label for e in config.estimands])
    for r in rows:
        total = r.replicates + r.failures
        if r.failures > MAX_FAILURE_RATE * total:
            raise StudyError(f"{r.failures} of {total} replicates failed for {r.estimator} ({r.estimand})")
    metadata = {
        "n": config.n,
        "replicates": config.replicates,
        "seed": config.seed,
        "variance_divisor": "R",
        "estimators": list(config.estimators),
        "estimands": [e.label for e in config.estimands],
    }
    return StudyResult(rows, raw, metadata)


def summarize(raw: list[dict], estimators, estimands) -> list[MetricsRow]:
    """Fold raw per-replicate records into one :class:`MetricsRow` per pair."""
    rows = []
    for label in estimands:
        for est_id in estimators:
            recs = sorted((r for r in raw if r["estimator"] == est_id and r["estimand"] == label),
                          key=lambda r: r["rep"])
            ok = [r for r in recs if not r["error"]]
            failures = len(recs) - len(ok)
            if not ok:
                rows.append(MetricsRow(est_id, label, *([math.nan] * 5), 0, failures))
                continue
            theta = np.array([r["theta"] for r in ok])
            truth = np.array([r["truth"] for r in ok])
            err = theta - truth
            bias = float(err.mean())
            se = float(theta.std())
            mse = float(np.mean(err ** 2))
            se_hat = np.array([r["se"] for r in ok])
            se_hat_mean = float(se_hat.mean()) if np.all(np.isfinite(se_hat)) else math.nan
            lo = np.array([r["ci_lo"] for r in ok])
            hi = np.array([r["ci_hi"] for r in ok])
            if np.all(np.isfinite(lo) & np.isfinite(hi)):
                coverage = float(np.mean((lo <= truth) & (truth <= hi)))
            else:
                coverage = math.nan
            rows.append(MetricsRow(est_id, label, mse, bias, se, se_hat_mean, coverage, len(ok), failures))
    return rows


# ---------------------------------------------------------------- tables

_COLUMNS = ("estimator", "estimand", "mse", "bias", "se", "se_hat", "ci", "replicates", "failures")


def _fmt(v: float) -> str:
    return "nan" if not math.isfinite(v) else f"{v:.4f}"


def _cells(row: MetricsRow) -> list[str]:
    return [row.estimator, row.estimand, _fmt(row.mse), _fmt(row.bias), _fmt(row.se), _fmt(row.se_hat_mean),
            _fmt(row.coverage), str(row.replicates), str(row.failures)]


def emit_table(rows, fmt: str = "csv") -> str:
    """Render metrics rows as CSV or a markdown table with 4 decimals."""
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(_COLUMNS)
        for row in rows:
            writer.writerow(_cells(row))
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(_COLUMNS) + " |", "|" + "|".join("---" for _ in _COLUMNS) + "|"]
        lines += ["| " + " | ".join(_cells(row)) + " |" for row in rows]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown table format {fmt!r}")


def parse_table(text: str, fmt: str = "csv") -> list[MetricsRow]:
    """Inverse of :func:`emit_table` (at 4-decimal precision)."""
    if fmt == "markdown":
        lines = [ln.strip() for ln in text.strip().splitlines()]
        records = [[c.strip() for c in ln.strip("|").split("|")] for ln in lines[2:] if ln]
        header = [c.strip() for c in lines[0].strip("|").split("|")]
    elif fmt == "csv":
        reader = list(csv.reader(io.StringIO(text)))
        header, records = reader[0], reader[1:]
    else:
        raise ValueError(f"unknown table format {fmt!r}")
    if tuple(header) != _COLUMNS:
        raise ValueError(f"unexpected table header {header}")
    rows = []
    for rec in records:
        est, label, mse, bias, se, se_hat, cov, reps, fails = rec
        rows.append(MetricsRow(est, label, float(mse), float(bias), float(se), float(se_hat), float(cov),
                               int(reps), int(fails)))
    return rows


_RAW_COLUMNS = ("rep", "estimator", "estimand", "truth", "theta", "se", "ci_lo", "ci_hi", "error")


def write_raw(raw: list[dict], stream) -> None:
    """Per-replicate records as CSV, floats written with ``repr``."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(_RAW_COLUMNS)
    for r in raw:
        writer.writerow([r["rep"], r["estimator"], r["estimand"]]
                        + [repr(float(r[k])) for k in ("truth", "theta", "se", "ci_lo", "ci_hi")] + [r["error"]])
