"""Command-line entry point.

Subcommands: ``simulate``, ``estimate``, ``gl-nodes`` and ``solve-fredholm``.
Options come from flags and, optionally, a JSON file given with ``--config``;
flags win over file values and unknown keys are rejected.  Exit status is 0 on
success, 1 on a computational failure and 2 on a usage error.  Data goes to
files or standard output and diagnostics to standard error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import re
import sys
import tempfile
from dataclasses import replace

import numpy as np

from .estimators import Estimand, EstimatorConfig, doubly_flexible, shift_dependent, singly_flexible
from .fredholm import DiscretizedFredholm, DivergenceError, landweber_solve
from .kernels import KernelSpec, default_bandwidth_1d
from .models import (
    DensityRatioModel,
    ExpTilt,
    NonparamRegressor,
    TruncationError,
    fit_gaussian_linear,
    normalize_ratio,
    paper_features,
    paper_misspecified_model,
)
from .quadrature import gauss_legendre
from .sampling import SchemaError, load_csv, true_conditional_model
from .simulation import SimConfig, StudyError, emit_table, parse_estimators, run_study, write_raw

SCHEMA_VERSION = 1
THREADS_ENV = "LABELSHIFT_THREADS"

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad or conflicting options; maps to exit status 2."""


# ---------------------------------------------------------------- option parsing

_NUM = r"\d+(?:\.\d*)?(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?"
_TERM = re.compile(rf"([-+]?)(?:({_NUM})\*?)?(y)?")


def parse_rho(text: str) -> ExpTilt:
    """Parse ``exp(a+b*y)`` (also ``exp(b*y)``, ``exp(a-y)``, ...) into an :class:`ExpTilt`.

    >>> parse_rho("exp(-0.7+1.2*y)")
    ExpTilt(intercept=-0.7, slope=1.2)
    """
    body = re.fullmatch(r"\s*exp\s*\((.*)\)\s*", text)
    if body is None:
        raise UsageError(f"--rho must look like exp(a+b*y), got {text!r}")
    expr = body.group(1).replace(" ", "")
    intercept = slope = 0.0
    pos, seen = 0, False
    while pos < len(expr):
        m = _TERM.match(expr, pos)
        if m is None or m.end() == pos or (m.group(2) is None and m.group(3) is None):
            raise UsageError(f"cannot parse {text!r} as exp(a+b*y)")
        sign = -1.0 if m.group(1) == "-" else 1.0
        coef = float(m.group(2)) if m.group(2) is not None else 1.0
        if m.group(3):
            slope += sign * coef
        else:
            intercept += sign * coef
        pos, seen = m.end(), True
        if pos < len(expr) and expr[pos] not in "+-":
            raise UsageError(f"cannot parse {text!r} as exp(a+b*y)")
    if not seen:
        raise UsageError(f"cannot parse {text!r} as exp(a+b*y)")
    return ExpTilt(intercept, slope)


def parse_se(text: str) -> tuple[str, int]:
    text = text.strip().lower()
    if text in ("plugin", "none"):
        return text, 0
    if text == "bootstrap":
        return "bootstrap", 200
    if text.startswith("bootstrap:"):
        try:
            b = int(text.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"bad bootstrap size in {text!r}") from None
        if b < 20:
            raise UsageError("bootstrap needs at least 20 resamples")
        return "bootstrap", b
    raise UsageError(f"--se must be plugin, none or bootstrap:B, got {text!r}")


def _targets(text: str) -> tuple[Estimand, ...]:
    try:
        return tuple(Estimand.parse(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise UsageError(str(exc)) from None


_DEFAULTS = {
    "simulate": {
        "n": 1000, "replicates": 200, "seed": 1, "estimators": "all", "targets": "mean,quantile:0.5",
        "out": None, "raw": None, "meta": None, "format": "csv", "kernel": "gaussian", "bandwidth": None,
        "bandwidth_scale": 2.5, "m": 50, "a": -5.0, "b": 5.0, "tol": 1e-14, "max_iter": 10_000_000,
        "misspecified_outcome": "fitted", "p_source": 0.5, "threads": None,
    },
    "estimate": {
        "input": None, "estimator": "doubly", "target": "mean", "rho": "exp(-0.7+1.2*y)", "no_normalize": False,
        "cond": None, "se": None, "level": 0.95, "out": None, "kernel": "gaussian", "bandwidth": None,
        "bandwidth_scale": 2.5, "m": 50, "a": -5.0, "b": 5.0, "tol": 1e-14, "max_iter": 10_000_000,
        "seed": 0, "step": None, "spectral_guard": False, "threads": None,
    },
    "gl-nodes": {"m": 50, "a": -5.0, "b": 5.0, "out": None},
    "solve-fredholm": {
        "phi": None, "target": None, "weights": None, "step": None, "tol": 1e-8, "max_iter": 50_000,
        "spectral_guard": False, "method": "spectral", "out": None, "diag": None,
    },
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = _Parser(prog="labelshift", description="Estimation of target-population functionals under label shift.")
    parser.add_argument("--config", default=S, help="JSON file with option values; flags override it")
    parser.add_argument("-v", "--verbose", action="store_true", default=S)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common_solver(p, tol_help):
        p.add_argument("--tol", type=float, default=S, help=tol_help)
        p.add_argument("--max-iter", type=int, default=S)
        p.add_argument("--config", default=S, help=argparse.SUPPRESS)

    def common_kernel(p):
        p.add_argument("--kernel", choices=("gaussian", "epanechnikov"), default=S)
        p.add_argument("--bandwidth", type=float, default=S, help="bandwidth of the smoother in y")
        p.add_argument("--bandwidth-scale", type=float, default=S, help="covariate bandwidth scale (default 2.5)")
        p.add_argument("--m", type=int, default=S, help="quadrature points (default 50)")
        p.add_argument("--a", type=float, default=S, help="quadrature interval start (default -5)")
        p.add_argument("--b", type=float, default=S, help="quadrature interval end (default 5)")
        p.add_argument("--threads", type=int, default=S)

    p = sub.add_parser("simulate", help="Monte Carlo study of the simulation design")
    p.add_argument("--n", type=int, default=S)
    p.add_argument("--replicates", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--estimators", default=S, help="comma-separated ids or 'all'")
    p.add_argument("--targets", default=S, help="e.g. mean,quantile:0.5")
    p.add_argument("--out", default=S, help="summary table (standard output if omitted)")
    p.add_argument("--raw", default=S, help="per-replicate CSV")
    p.add_argument("--meta", default=S, help="study metadata JSON")
    p.add_argument("--format", choices=("csv", "markdown"), default=S)
    p.add_argument("--misspecified-outcome", choices=("fitted", "fixed"), default=S)
    p.add_argument("--p-source", type=float, default=S)
    common_kernel(p)
    common_solver(p, "Landweber relative-change tolerance (default 1e-14)")

    p = sub.add_parser("estimate", help="estimate a mean or quantile from a CSV sample")
    p.add_argument("--input", default=S)
    p.add_argument("--estimator", choices=("shift-dependent", "doubly", "singly"), default=S)
    p.add_argument("--target", default=S, help="mean or quantile:<level>")
    p.add_argument("--rho", default=S, help='working ratio, e.g. "exp(-0.7+1.2*y)"')
    p.add_argument("--no-normalize", action="store_true", default=S, help="use --rho without normalizing it")
    p.add_argument("--cond", choices=("fit-gaussian", "fit-paper-features", "paper-misspecified", "true-paper"),
                   default=S, help="working outcome model (doubly estimator only)")
    p.add_argument("--se", default=S, help="plugin, none or bootstrap:B")
    p.add_argument("--level", type=float, default=S)
    p.add_argument("--out", default=S, help="result JSON (standard output if omitted)")
    p.add_argument("--seed", type=int, default=S, help="bootstrap seed")
    p.add_argument("--step", type=float, default=S, help="Landweber step (default 1/l)")
    p.add_argument("--spectral-guard", action="store_true", default=S)
    common_kernel(p)
    common_solver(p, "Landweber relative-change tolerance (default 1e-14)")

    p = sub.add_parser("gl-nodes", help="Gauss-Legendre nodes and weights as CSV")
    p.add_argument("--m", type=int, default=S)
    p.add_argument("--a", type=float, default=S)
    p.add_argument("--b", type=float, default=S)
    p.add_argument("--out", default=S)
    p.add_argument("--config", default=S, help=argparse.SUPPRESS)

    p = sub.add_parser("solve-fredholm", help="Landweber solve of Phi (a * w) = target from CSV files")
    p.add_argument("--phi", default=S, help="CSV matrix without header")
    p.add_argument("--target", default=S, help="CSV vector")
    p.add_argument("--weights", default=S, help="CSV vector of quadrature weights (ones if omitted)")
    p.add_argument("--step", type=float, default=S)
    p.add_argument("--spectral-guard", action="store_true", default=S)
    p.add_argument("--method", choices=("spectral", "loop"), default=S)
    p.add_argument("--out", default=S, help="solution CSV (standard output if omitted)")
    p.add_argument("--diag", default=S, help="diagnostics JSON")
    common_solver(p, "relative-change tolerance (default 1e-8)")
    return parser


def parse_args(argv) -> dict:
    """Merged configuration: defaults, then ``--config`` file, then flags."""
    ns = vars(build_parser().parse_args(argv))
    command = ns.pop("command", None)
    if command is None:
        raise UsageError("a subcommand is required: simulate, estimate, gl-nodes or solve-fredholm")
    cfg = dict(_DEFAULTS[command])
    path = ns.pop("config", None)
    verbose = bool(ns.pop("verbose", False))
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {path}: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
        data = {k.replace("-", "_"): v for k, v in data.items()}
        data.pop("schema_version", None)
        unknown = sorted(set(data) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(data)
    cfg.update(ns)
    cfg["command"] = command
    cfg["verbose"] = verbose
    return cfg


# ---------------------------------------------------------------- output helpers


def _atomic_write(path: str | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json(obj) -> str:
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        if isinstance(v, (np.floating, np.integer)):
            return clean(v.item())
        return v

    return json.dumps(clean(obj), indent=2, sort_keys=True) + "\n"


def _threads(cfg) -> int:
    t = cfg.get("threads")
    if t is None:
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                t = int(env)
            except ValueError:
                raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    t = 1 if t is None else int(t)
    if t < 1:
        raise UsageError("--threads must be at least 1")
    return t


def _estimator_config(cfg, n1: int | None = None) -> EstimatorConfig:
    if cfg["m"] < 1 or not cfg["a"] < cfg["b"]:
        raise UsageError("quadrature needs m >= 1 and a < b")
    kernel = None
    if cfg["bandwidth"] is not None or cfg["kernel"] != "gaussian":
        h = cfg["bandwidth"] if cfg["bandwidth"] is not None else (default_bandwidth_1d(n1) if n1 else None)
        if h is not None:
            kernel = KernelSpec(cfg["kernel"], h)
    solver = {"tol": cfg["tol"], "max_iter": cfg["max_iter"]}
    if cfg.get("spectral_guard"):
        solver["spectral_guard"] = True
    if cfg.get("step") is not None:
        solver["step"] = cfg["step"]
    return EstimatorConfig(kernel=kernel, rule=gauss_legendre(cfg["m"], cfg["a"], cfg["b"]), solver=solver)


# ---------------------------------------------------------------- commands


def _cmd_simulate(cfg) -> int:
    try:
        estimators = parse_estimators(cfg["estimators"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if cfg["n"] < 10 or cfg["replicates"] < 1:
        raise UsageError("--n must be at least 10 and --replicates at least 1")
    if cfg["bandwidth"] is not None:
        raise UsageError("simulate sets the y bandwidth per replicate; use --bandwidth-scale for covariates")
    ecfg = _estimator_config(cfg)
    if cfg["kernel"] != "gaussian":
        raise UsageError("simulate uses the Gaussian smoother in y; --kernel applies to estimate only")
    config = SimConfig(
        n=cfg["n"], replicates=cfg["replicates"], seed=cfg["seed"], estimators=estimators,
        estimands=_targets(cfg["targets"]), estimator_config=ecfg, p_source=cfg["p_source"],
        bandwidth_scale=cfg["bandwidth_scale"], misspecified_outcome=cfg["misspecified_outcome"],
        workers=_threads(cfg),
    )
    result = run_study(config)
    _atomic_write(cfg["out"], emit_table(result.rows, cfg["format"]))
    if cfg["raw"]:
        buf = io.StringIO()
        write_raw(result.raw, buf)
        _atomic_write(cfg["raw"], buf.getvalue())
    if cfg["meta"]:
        _atomic_write(cfg["meta"], _json({"schema_version": SCHEMA_VERSION, **result.metadata}))
    return EXIT_OK


def _cond_model(name, sample):
    if name == "fit-gaussian":
        return fit_gaussian_linear(sample)
    if name == "fit-paper-features":
        return fit_gaussian_linear(sample, paper_features)
    if name == "paper-misspecified":
        return paper_misspecified_model()
    return true_conditional_model()


def _cmd_estimate(cfg) -> int:
    if not cfg["input"]:
        raise UsageError("estimate needs --input")
    estimand = _targets(cfg["target"])
    if len(estimand) != 1:
        raise UsageError("--target takes exactly one target")
    estimand = estimand[0]
    if cfg["cond"] is not None and cfg["estimator"] != "doubly":
        raise UsageError("--cond applies to the doubly estimator only")
    se_method, b = parse_se(cfg["se"] if cfg["se"] is not None else ("plugin" if estimand.is_mean else "bootstrap:200"))
    tilt = parse_rho(cfg["rho"])
    try:
        sample = load_csv(cfg["input"])
    except OSError as exc:
        raise UsageError(f"cannot read {cfg['input']}: {exc}") from None
    ratio = DensityRatioModel(tilt) if cfg["no_normalize"] else normalize_ratio(tilt, sample)
    ecfg = replace(_estimator_config(cfg, sample.n1), se=se_method, bootstrap_b=b or 200,
                   bootstrap_seed=cfg["seed"], level=cfg["level"])
    if cfg["estimator"] == "shift-dependent":
        result = shift_dependent(sample, ratio, estimand, ecfg)
    elif cfg["estimator"] == "doubly":
        result = doubly_flexible(sample, ratio, _cond_model(cfg["cond"] or "fit-gaussian", sample), estimand, ecfg)
    else:
        regressor = NonparamRegressor.from_sample(sample, cfg["bandwidth_scale"])
        result = singly_flexible(sample, ratio, regressor, estimand, ecfg)
    payload = {"schema_version": SCHEMA_VERSION, **result.as_dict(), "n": sample.n, "n1": sample.n1,
               "pi": sample.pi, "level": cfg["level"]}
    _atomic_write(cfg["out"], _json(payload))
    return EXIT_OK


def _cmd_gl_nodes(cfg) -> int:
    try:
        rule = gauss_legendre(cfg["m"], cfg["a"], cfg["b"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["node", "weight"])
    for t, w in zip(rule.nodes, rule.weights):
        writer.writerow([repr(float(t)), repr(float(w))])
    _atomic_write(cfg["out"], buf.getvalue())
    return EXIT_OK


def _read_matrix(path, what):
    if path is None:
        raise UsageError(f"solve-fredholm needs --{what}")
    try:
        return np.loadtxt(path, delimiter=",", ndmin=2)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read --{what} {path}: {exc}") from None


def _cmd_solve_fredholm(cfg) -> int:
    phi = _read_matrix(cfg["phi"], "phi")
    target = _read_matrix(cfg["target"], "target").ravel()
    weights = np.ones(phi.shape[1]) if cfg["weights"] is None else _read_matrix(cfg["weights"], "weights").ravel()
    try:
        problem = DiscretizedFredholm(phi, target, weights, step=cfg["step"], tol=cfg["tol"],
                                      max_iter=cfg["max_iter"], spectral_guard=bool(cfg["spectral_guard"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    a, diag = landweber_solve(problem, method=cfg["method"])
    _atomic_write(cfg["out"], "".join(f"{v!r}\n" for v in map(float, a)))
    if cfg["diag"]:
        _atomic_write(cfg["diag"], _json({"schema_version": SCHEMA_VERSION, **diag.as_dict()}))
    return EXIT_OK


_COMMANDS = {
    "simulate": _cmd_simulate,
    "estimate": _cmd_estimate,
    "gl-nodes": _cmd_gl_nodes,
    "solve-fredholm": _cmd_solve_fredholm,
}


def run(cfg: dict) -> int:
    """Execute a merged configuration and return the exit status."""
    try:
        return _COMMANDS[cfg["command"]](cfg)
    except UsageError as exc:
        print(f"labelshift: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"labelshift: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (SchemaError, TruncationError, StudyError) as exc:
        print(f"labelshift: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"labelshift: computation failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def main(argv=None) -> int:
    try:
        cfg = parse_args(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(f"labelshift: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return run(cfg)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
