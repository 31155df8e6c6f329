"""Estimators of a target-population mean or quantile.

All four estimators share one shape.  Each builds per-unit terms
``phi_i(theta)`` whose average is the estimating function.  For the mean the
root is explicit; for a quantile it is found by bisection.  The per-unit
terms also give the plugin standard error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.special import ndtri

from .fredholm import (
    DiscretizedFredholm,
    SolveDiagnostics,
    SpectralFactorization,
    build_doubly_kernel,
    build_singly_kernel,
    general_u_target,
    landweber_solve,
)
from .kernels import KernelSpec, default_bandwidth_1d, nw_weights_1d
from .models import (
    DensityRatioModel,
    ExpTilt,
    GaussianLinear,
    NonparamRegressor,
    cond_expect,
    fit_gaussian_linear,
    normalize_ratio,
    weights_w,
)
from .quadrature import QuadratureRule, gauss_legendre
from .sampling import StackedSample, SyntheticSample, mix_seed

__all__ = [
    "Estimand",
    "MEAN",
    "EstimatorConfig",
    "EstimateResult",
    "BracketError",
    "shift_dependent",
    "oracle",
    "doubly_flexible",
    "singly_flexible",
    "solve_estimating_equation",
    "estimate_se",
    "combine_terms",
    "ESTIMATOR_SOLVER",
]

# Tighter than the bare solver default; see DiscretizedFredholm for the stopping rule.
ESTIMATOR_SOLVER = {"tol": 1e-14, "max_iter": 10_000_000}


class BracketError(ValueError):
    """The estimating function has no sign change on the (widened) bracket."""


@dataclass(frozen=True)
class Estimand:
    """``kind`` is ``"mean"`` or ``"quantile"``; quantiles carry a level in (0, 1)."""

    kind: str = "mean"
    level: float | None = None

    def __post_init__(self):
        if self.kind not in ("mean", "quantile"):
            raise ValueError(f"unknown estimand kind {self.kind!r}")
        if self.kind == "quantile":
            if self.level is None or not 0 < self.level < 1:
                raise ValueError(f"quantile level must lie in (0, 1), got {self.level!r}")
            object.__setattr__(self, "level", float(self.level))
        elif self.level is not None:
            raise ValueError("the mean takes no level")

    @classmethod
    def quantile(cls, level: float) -> "Estimand":
        return cls("quantile", level)

    @classmethod
    def parse(cls, text: str) -> "Estimand":
        """``"mean"``, ``"median"`` or ``"quantile:<level>"``."""
        text = text.strip().lower()
        if text == "mean":
            return cls()
        if text == "median":
            return cls.quantile(0.5)
        if text.startswith("quantile:"):
            try:
                level = float(text.split(":", 1)[1])
            except ValueError:
                raise ValueError(f"bad quantile level in {text!r}") from None
            return cls.quantile(level)
        raise ValueError(f"unknown target {text!r}; use mean or quantile:<level>")

    @property
    def label(self) -> str:
        return "mean" if self.kind == "mean" else f"quantile:{self.level:g}"

    @property
    def is_mean(self) -> bool:
        return self.kind == "mean"

    def u(self, y, theta: float) -> np.ndarray:
        """``U(y, theta)``: ``y - theta`` or ``t - I(y < theta)``."""
        y = np.asarray(y, dtype=float)
        if self.is_mean:
            return y - theta
        return self.level - (y < theta)


MEAN = Estimand()


@dataclass(frozen=True)
class EstimatorConfig:
    """Tuning shared by the estimators.

    Attributes
    ----------
    kernel : KernelSpec, optional
        Smoother in y for the integral equation; bandwidth ``n1 ** (-1/3)``
        when omitted.
    rule : QuadratureRule
        Integration rule for the doubly flexible path.
    solver : dict
        ``tol``, ``max_iter``, ``step`` and ``spectral_guard`` for Landweber.
    se : {"plugin", "bootstrap", "none"}
    bootstrap_b, bootstrap_seed : int
    level : float
        Confidence level of the reported interval.
    closed_form : bool
        Use closed-form conditional moments where the models allow it.
    warm_start : bool
        Start each quantile re-solve from the previous solution.
    xtol : float
        Bisection stops at this fraction of the initial bracket width.
    """

    kernel: KernelSpec | None = None
    rule: QuadratureRule = field(default_factory=lambda: gauss_legendre(50, -5.0, 5.0))
    solver: dict = field(default_factory=lambda: dict(ESTIMATOR_SOLVER))
    se: str = "plugin"
    bootstrap_b: int = 200
    bootstrap_seed: int = 0
    level: float = 0.95
    closed_form: bool = True
    warm_start: bool = False
    xtol: float = 1e-6

    def __post_init__(self):
        if self.se not in ("plugin", "bootstrap", "none"):
            raise ValueError(f"se must be plugin, bootstrap or none, got {self.se!r}")
        if not 0 < self.level < 1:
            raise ValueError("confidence level must lie in (0, 1)")


@dataclass(frozen=True)
class EstimateResult:
    theta: float
    se: float | None = None
    ci: tuple[float, float] | None = None
    se_method: str = "none"
    estimator: str = ""
    estimand: str = "mean"
    diagnostics: SolveDiagnostics | None = None
    b_summary: dict | None = None
    flags: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        return {
            "theta": self.theta,
            "se": self.se,
            "ci": list(self.ci) if self.ci is not None else None,
            "method": self.se_method,
            "estimator": self.estimator,
            "estimand": self.estimand,
            "solver": self.diagnostics.as_dict() if self.diagnostics is not None else None,
            "b_summary": self.b_summary,
            "flags": list(self.flags),
        }

    def covers(self, truth: float) -> bool:
        return self.ci is not None and self.ci[0] <= truth <= self.ci[1]


# ---------------------------------------------------------------- root finding


def solve_estimating_equation(psi: Callable[[float], float], bracket: tuple[float, float], xtol: float = 1e-6,
                              breakpoints=None, max_widen: int = 4) -> float:
    """Smallest ``theta`` with ``psi(theta) <= 0`` for a non-increasing ``psi``.

    Bisection keeps ``psi(lo) > 0 >= psi(hi)`` until the bracket is narrower
    than ``xtol`` times its starting width.  When ``psi`` is a step function
    that is constant on ``(b_k, b_{k+1}]``, pass its jump points as
    ``breakpoints``; the search then runs over them and returns the exact
    infimum ``b_k``.  A bracket without a sign change is doubled about its
    centre up to ``max_widen`` times.

    >>> solve_estimating_equation(lambda t: 1.0 - t, (0.0, 2.0))  # doctest: +ELLIPSIS
    1.0...
    """
    lo, hi = map(float, bracket)
    if not lo < hi:
        raise ValueError("bracket must satisfy lo < hi")
    for attempt in range(max_widen + 1):
        f_lo, f_hi = psi(lo), psi(hi)
        if f_lo > 0 >= f_hi:
            break
        if attempt == max_widen:
            raise BracketError(
                f"no sign change on [{lo:.6g}, {hi:.6g}]: psi(lo)={f_lo:.3g}, psi(hi)={f_hi:.3g}"
            )
        mid, half = 0.5 * (lo + hi), (hi - lo)
        lo, hi = mid - half, mid + half
    if breakpoints is not None:
        # psi is constant on (b_k, b_{k+1}], so psi(b_{k+1}) is its value just right of b_k
        b = np.unique(np.asarray(breakpoints, dtype=float))
        b = b[(b >= lo) & (b < hi)]
        if b.size:
            right = np.append(b[1:], hi)
            i, j = 0, b.size - 1
            while i < j:
                k = (i + j) // 2
                if psi(float(right[k])) <= 0:
                    j = k
                else:
                    i = k + 1
            return float(b[i])
    width = xtol * (hi - lo)
    while hi - lo > width:
        mid = 0.5 * (lo + hi)
        if psi(mid) > 0:
            lo = mid
        else:
            hi = mid
    return hi


def _bracket(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    return float(v.min()) - 1.0, float(v.max()) + 1.0


# ---------------------------------------------------------------- shared pieces


def combine_terms(sample: StackedSample, rho_src, u_src, b) -> np.ndarray:
    """Per-unit ``(r/pi) rho*(y) {U - b(x)} + (1-r)/(1-pi) b(x)`` over all n units.

    ``rho_src`` and ``u_src`` are given on the source rows, ``b`` on every row.
    """
    b = np.asarray(b, dtype=float)
    out = b / (1.0 - sample.pi)
    out[sample.r] = np.asarray(rho_src) * (np.asarray(u_src) - b[sample.r]) / sample.pi
    return out


def _sd(v) -> float:
    return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0


def _normal_ci(theta, se, level):
    z = float(ndtri(0.5 + level / 2.0))
    return (theta - z * se, theta + z * se)


def _sandwich_se(terms_at: Callable[[float], np.ndarray], theta: float, delta: float) -> tuple[float, float]:
    """``sd(phi(theta)) / sqrt(n) / |slope|`` with a central-difference slope."""
    phi = terms_at(theta)
    slope = (float(np.mean(terms_at(theta + delta))) - float(np.mean(terms_at(theta - delta)))) / (2 * delta)
    if not slope < 0:
        return math.nan, slope
    return _sd(phi) / math.sqrt(len(phi)) / abs(slope), slope


def _hall_sheather(n: int, t: float, level: float) -> float:
    """Hall-Sheather bandwidth on the probability scale for a level-``t`` quantile."""
    z = float(ndtri(0.5 + level / 2.0))
    zt = float(ndtri(t))
    dens = math.exp(-0.5 * zt * zt) / math.sqrt(2.0 * math.pi)
    return n ** (-1.0 / 3.0) * z ** (2.0 / 3.0) * (1.5 * dens ** 2 / (2.0 * zt ** 2 + 1.0)) ** (1.0 / 3.0)


def _quantile_se(terms_at: Callable[[float], np.ndarray], theta: float, pilot_delta: float, t: float,
                 level: float) -> float:
    """Sandwich SE whose difference step is the Hall-Sheather bandwidth over a pilot slope.

    The estimating function is on the probability scale, so a step of ``h``
    in probability corresponds to ``h / |slope|`` in theta.
    """
    pilot = _sandwich_se(terms_at, theta, pilot_delta)[1]
    if not pilot < 0:
        return math.nan
    h = _hall_sheather(len(terms_at(theta)), t, level)
    return _sandwich_se(terms_at, theta, h / abs(pilot))[0]


def _finish(theta, plugin_se, config: EstimatorConfig, name, estimand, rerun, sample, diagnostics=None,
            b=None, flags=()):
    flags = list(flags)
    se, ci, method = None, None, "none"
    if config.se == "plugin":
        se, method = plugin_se, "plugin"
        if se is not None and math.isfinite(se):
            ci = _normal_ci(theta, se, config.level)
        else:
            flags.append("plugin_se_unavailable")
    elif config.se == "bootstrap":
        se, (lo, hi) = estimate_se(sample, rerun, "bootstrap", config.bootstrap_b, config.bootstrap_seed,
                                   level=config.level, return_ci=True)
        ci, method = (lo, hi), "bootstrap"
        if not lo <= theta <= hi:
            flags.append("bootstrap_ci_excludes_theta")
    if diagnostics is not None and not diagnostics.converged:
        flags.append("solver_not_converged")
    summary = None
    if b is not None:
        b = np.asarray(b)
        summary = {"min": float(b.min()), "max": float(b.max()), "mean": float(b.mean())}
    return EstimateResult(float(theta), se, ci, method, name, estimand.label, diagnostics, summary, tuple(flags))


def _refit_ratio(ratio: DensityRatioModel, sample) -> DensityRatioModel:
    return normalize_ratio(ratio.base, sample) if ratio.normalized else ratio


def _refit_model(model, sample):
    if isinstance(model, GaussianLinear) and model.name == "fitted":
        return fit_gaussian_linear(sample, model.feature_map)
    if isinstance(model, NonparamRegressor):
        return model.refit(sample)
    return model


# ---------------------------------------------------------------- shift-dependent and oracle


def _ipw_terms(sample, rho_src, estimand, theta=0.0):
    y = sample.source_y
    out = np.zeros(sample.n)
    u = y if estimand.is_mean else estimand.u(y, theta)
    out[sample.r] = np.asarray(rho_src) * u / sample.pi
    return out


def shift_dependent(sample: StackedSample, ratio: DensityRatioModel, estimand: Estimand = MEAN,
                    config: EstimatorConfig | None = None) -> EstimateResult:
    """Importance-weighted source average ``n^{-1} sum (r/pi) rho*(y) U``.

    Consistent only when ``ratio`` is the true density ratio.
    """
    config = config or EstimatorConfig()
    rho_src = np.asarray(ratio(sample.source_y), dtype=float)
    if not np.all(np.isfinite(rho_src)):
        raise ValueError("ratio is not finite on the source outcomes")

    def rerun(s):
        return shift_dependent(s, _refit_ratio(ratio, s), estimand, replace(config, se="none")).theta

    if estimand.is_mean:
        terms = _ipw_terms(sample, rho_src, estimand)
        theta = float(terms.mean())
        se = _sd(terms) / math.sqrt(sample.n)
    else:
        def terms_at(t):
            return _ipw_terms(sample, rho_src, estimand, t)

        theta = solve_estimating_equation(lambda t: float(terms_at(t).mean()), _bracket(sample.source_y),
                                          config.xtol, breakpoints=sample.source_y)
        se = (_quantile_se(terms_at, theta, default_bandwidth_1d(sample.n1), estimand.level, config.level)
              if config.se == "plugin" else None)
    return _finish(theta, se, config, "shift-dependent", estimand, rerun, sample)


def oracle(synthetic: SyntheticSample, estimand: Estimand = MEAN,
           config: EstimatorConfig | None = None) -> EstimateResult:
    """Target-side average (or quantile) of the hidden target outcomes."""
    if not isinstance(synthetic, SyntheticSample):
        raise TypeError("the oracle needs a SyntheticSample with hidden target outcomes")
    config = config or EstimatorConfig()
    y = synthetic.hidden_target_y
    n0 = y.size
    if estimand.is_mean:
        theta = float(y.mean())
        se = _sd(y) / math.sqrt(n0)
    else:
        theta = float(np.quantile(y, estimand.level, method="inverted_cdf"))
        se = _quantile_se(lambda t: estimand.u(y, t), theta, float(n0) ** (-1.0 / 3.0), estimand.level, config.level)
    cfg = config if config.se != "bootstrap" else replace(config, se="plugin")
    # bootstrap is not offered for the oracle: its plugin SE is exact for the mean
    return _finish(theta, se, cfg, "oracle", estimand, None, synthetic.sample)


# ---------------------------------------------------------------- flexible estimators


class _FlexibleContext:
    """Everything that does not depend on theta, plus the per-theta solve."""

    def __init__(self, sample, ratio, problem: DiscretizedFredholm, w, rho_src, moment_matrix, config):
        self.sample = sample
        self.ratio = ratio
        self.problem = problem
        self.w = w
        self.rho_src = rho_src
        # b(x_i) = w_i * (moment_matrix @ a)[i] for the solved a
        self.moment_matrix = moment_matrix
        self.config = config
        self.method = "spectral"
        self.fac = SpectralFactorization.of(problem)
        self.last_a = None
        self.last_diag = None
        spec = config.kernel or KernelSpec("gaussian", default_bandwidth_1d(sample.n1))
        self.h = spec.bandwidth
        self._nw = None
        self._spec = spec

    @property
    def nw(self):
        if self._nw is None:
            self._nw = nw_weights_1d(self._spec, self.sample.source_y, self.problem.eval_points)
        return self._nw

    def solve(self, target):
        a0 = self.last_a if (self.config.warm_start and self.last_a is not None) else None
        a, diag = landweber_solve(self.problem.with_target(target), a0, self.method, self.fac)
        self.last_a, self.last_diag = a, diag
        return a

    def mean_terms(self):
        a = self.solve(self.problem.eval_points)
        b = self.w * (self.moment_matrix @ a)
        return combine_terms(self.sample, self.rho_src, self.sample.source_y, b), b

    def quantile_terms(self, estimand, theta, cond_u_rho2):
        """``cond_u_rho2`` is ``E*{U(Y, theta) rho*^2(Y) | x_i}`` on every row."""
        s = self.sample
        target = general_u_target(self.nw, estimand.u(self.problem.eval_points, theta), self.w[s.r], cond_u_rho2[s.r])
        a = self.solve(target)
        b = self.w * (cond_u_rho2 + self.moment_matrix @ a)
        return combine_terms(s, self.rho_src, estimand.u(s.source_y, theta), b), b


def _run_flexible(ctx: _FlexibleContext, estimand, cond_u_rho2_at, config, name, rerun):
    s = ctx.sample
    if estimand.is_mean:
        terms, b = ctx.mean_terms()
        theta = float(terms.mean())
        # phi_eff subtracts (1-r)/(1-pi) theta, so the slope is exactly -1
        phi = terms - (~s.r) / (1.0 - s.pi) * theta
        se = _sd(phi) / math.sqrt(s.n)
        return _finish(theta, se, config, name, estimand, rerun, s, ctx.last_diag, b)

    def terms_at(t):
        return ctx.quantile_terms(estimand, t, cond_u_rho2_at(t))[0]

    theta = solve_estimating_equation(lambda t: float(terms_at(t).mean()), _bracket(s.source_y), config.xtol)
    terms, b = ctx.quantile_terms(estimand, theta, cond_u_rho2_at(theta))
    diag = ctx.last_diag
    se = _quantile_se(terms_at, theta, ctx.h, estimand.level, config.level) if config.se == "plugin" else None
    return _finish(theta, se, config, name, estimand, rerun, s, diag, b)


def doubly_flexible(sample: StackedSample, ratio: DensityRatioModel, cond_model, estimand: Estimand = MEAN,
                    config: EstimatorConfig | None = None) -> EstimateResult:
    """Estimator that stays consistent when both working models are wrong.

    Parameters
    ----------
    sample : StackedSample
    ratio : DensityRatioModel
        Working density ratio ``rho*``.
    cond_model : GaussianLinear or FixedDensity
        Working conditional density ``p*(y | x)``.  A model fitted with
        :func:`fit_gaussian_linear` is refitted on bootstrap resamples.
    estimand : Estimand
    config : EstimatorConfig, optional
    """
    config = config or EstimatorConfig()
    rule = config.rule
    w = weights_w(ratio, cond_model, sample, rule, closed_form=config.closed_form)
    dens = cond_model.density(rule.nodes, sample.x)
    problem = build_doubly_kernel(sample, ratio, cond_model, config.kernel, rule, w=w, dens=dens,
                                  solver=config.solver)
    moment = dens * (rule.weights * ratio(rule.nodes))[None, :]
    ctx = _FlexibleContext(sample, ratio, problem, w, ratio(sample.source_y), moment, config)

    rho2 = ratio.power(2)
    cf = config.closed_form
    e2 = None if estimand.is_mean else np.asarray(cond_expect(cond_model, rho2, sample.x, rule, closed_form=cf))

    def cond_u_rho2_at(theta):
        below = np.asarray(cond_expect(cond_model, rho2, sample.x, rule, upper=theta, closed_form=cf))
        return estimand.level * e2 - below

    def rerun(s):
        return doubly_flexible(s, _refit_ratio(ratio, s), _refit_model(cond_model, s), estimand,
                               replace(config, se="none")).theta

    return _run_flexible(ctx, estimand, cond_u_rho2_at, config, "doubly-flexible", rerun)


def singly_flexible(sample: StackedSample, ratio: DensityRatioModel, regressor: NonparamRegressor | None = None,
                    estimand: Estimand = MEAN, config: EstimatorConfig | None = None) -> EstimateResult:
    """Estimator with a kernel regression in place of the outcome model.

    ``regressor`` defaults to :meth:`NonparamRegressor.from_sample` with the
    product Gaussian kernel and bandwidth ``2.5 n1 ** (-1 / (4 + d))``.
    """
    config = config or EstimatorConfig()
    regressor = regressor if regressor is not None else NonparamRegressor.from_sample(sample)
    smoother = regressor.weights(sample.x)
    w = weights_w(ratio, regressor, sample, smoother=smoother)
    problem = build_singly_kernel(sample, ratio, regressor, config.kernel, w=w, smoother=smoother,
                                  solver=config.solver)
    rho_src = ratio(sample.source_y)
    ctx = _FlexibleContext(sample, ratio, problem, w, rho_src, smoother * rho_src[None, :], config)
    rho2_src = rho_src ** 2
    ys = sample.source_y

    def cond_u_rho2_at(theta):
        return smoother @ (estimand.u(ys, theta) * rho2_src)

    def rerun(s):
        return singly_flexible(s, _refit_ratio(ratio, s), _refit_model(regressor, s), estimand,
                               replace(config, se="none")).theta

    return _run_flexible(ctx, estimand, cond_u_rho2_at, config, "singly-flexible", rerun)


# ---------------------------------------------------------------- standard errors


def _stratified_resample(sample: StackedSample, rng: np.random.Generator) -> StackedSample:
    src = np.flatnonzero(sample.r)
    tgt = np.flatnonzero(~sample.r)
    idx = np.concatenate([rng.choice(src, src.size, replace=True), rng.choice(tgt, tgt.size, replace=True)])
    return sample.take(np.sort(idx))


def estimate_se(sample: StackedSample, estimator: Callable[[StackedSample], float], method: str = "bootstrap",
                b: int = 200, seed: int = 0, level: float = 0.95, return_ci: bool = False, terms=None):
    """Standard error of an estimator.

    Parameters
    ----------
    sample : StackedSample
    estimator : callable
        Maps a sample to a point estimate; re-run on every resample.
    method : {"bootstrap", "plugin"}
        ``"plugin"`` needs the per-unit influence terms in ``terms`` and
        returns ``sd(terms) / sqrt(n)``.
    b : int
        Number of resamples, at least 20.  Resample ``k`` is drawn within the
        ``r = 1`` and ``r = 0`` strata from ``(seed, k)``.
    return_ci : bool
        Also return the percentile interval at ``level``.
    """
    if method == "plugin":
        if terms is None:
            raise ValueError("plugin standard errors need the per-unit terms")
        se = _sd(terms) / math.sqrt(len(terms))
        return (se, None) if return_ci else se
    if method != "bootstrap":
        raise ValueError(f"unknown method {method!r}")
    if int(b) != b or b < 20:
        raise ValueError(f"bootstrap needs B >= 20 resamples, got {b!r}")
    draws = []
    failures = 0
    for k in range(int(b)):
        rng = mix_seed(seed, k)
        try:
            draws.append(float(estimator(_stratified_resample(sample, rng))))
        except (ValueError, ArithmeticError, RuntimeError):
            failures += 1
    if failures > 0.05 * b:
        raise RuntimeError(f"{failures} of {b} bootstrap resamples failed")
    draws = np.asarray(draws)
    se = _sd(draws)
    if not return_ci:
        return se
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(draws, [alpha, 1.0 - alpha])
    return se, (float(lo), float(hi))
