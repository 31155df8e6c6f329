"""Working models.

Two kinds of possibly misspecified inputs drive the flexible estimators:

* a density-ratio working model ``rho*(y) = c* * base(y)`` whose normalizer
  is fixed from the stacked sample, and
* a conditional-outcome working model ``p*(y | x)``: a Gaussian linear model
  (fixed or fitted by maximum likelihood on the source rows) or any fixed
  density, or, for the singly flexible path, a Nadaraya-Watson regressor
  that replaces ``E_p(. | x)`` altogether.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp, ndtr

from .kernels import KernelSpec, default_bandwidth_multi, nw_weights_multi
from .quadrature import QuadratureRule, remap

__all__ = [
    "ExpTilt",
    "DensityRatioModel",
    "normalize_ratio",
    "GaussianLinear",
    "FixedDensity",
    "TruncationError",
    "identity_features",
    "paper_features",
    "fit_gaussian_linear",
    "paper_misspecified_model",
    "cond_expect",
    "weights_w",
    "NonparamRegressor",
    "nonparam_cond_expect",
]

MIN_MASS = 0.99


class TruncationError(ValueError):
    """The quadrature interval misses too much of a conditional density."""


@dataclass(frozen=True)
class ExpTilt:
    """The function ``y -> exp(intercept + slope * y)``."""

    intercept: float = 0.0
    slope: float = 1.0

    def __call__(self, y):
        return np.exp(self.intercept + self.slope * np.asarray(y, dtype=float))

    def power(self, k: float) -> "ExpTilt":
        return ExpTilt(k * self.intercept, k * self.slope)

    def scaled(self, c: float) -> "ExpTilt":
        return ExpTilt(self.intercept + math.log(c), self.slope)


@dataclass(frozen=True)
class DensityRatioModel:
    """``rho*(y) = normalizer * base(y)``."""

    base: Callable = field(default_factory=lambda: ExpTilt(0.0, 0.0))
    normalizer: float = 1.0
    normalized: bool = False

    def __post_init__(self):
        if not (self.normalizer > 0 and math.isfinite(self.normalizer)):
            raise ValueError(f"normalizer must be positive and finite, got {self.normalizer!r}")

    def __call__(self, y):
        return self.normalizer * np.asarray(self.base(y), dtype=float)

    @property
    def tilt(self) -> ExpTilt | None:
        """The model as a single ``ExpTilt`` when its base is exponential."""
        if isinstance(self.base, ExpTilt):
            return self.base.scaled(self.normalizer)
        return None

    def power(self, k: int):
        """``rho*(y) ** k`` as an ``ExpTilt`` when possible, else a callable."""
        tilt = self.tilt
        if tilt is not None:
            return tilt.power(k)
        return lambda y: self(y) ** k


def normalize_ratio(base: Callable, sample) -> DensityRatioModel:
    """Scale ``base`` so that ``n^{-1} sum_i r_i rho*(y_i) = pi``.

    Any positive multiple of ``base`` produces the same normalized model.
    """
    y = sample.source_y
    if isinstance(base, ExpTilt):
        # log domain, so steep slopes do not overflow; the intercept absorbs c
        log_c = math.log(sample.pi * sample.n) - float(logsumexp(base.slope * y))
        return DensityRatioModel(ExpTilt(log_c, base.slope), 1.0, normalized=True)
    total = float(np.sum(np.asarray(base(y), dtype=float)))
    if not (math.isfinite(total) and total > 0):
        raise ValueError("cannot normalize: base ratio sums to zero or non-finite over source outcomes")
    return DensityRatioModel(base, sample.pi * sample.n / total, normalized=True)


def identity_features(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=float)


def paper_features(x: np.ndarray) -> np.ndarray:
    """``[x1, exp(x2 / 2), x3 / (1 + exp(x2)) + 10]`` applied row-wise."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return np.column_stack([x[:, 0], np.exp(x[:, 1] / 2.0), x[:, 2] / (1.0 + np.exp(x[:, 1])) + 10.0])


@dataclass(frozen=True)
class GaussianLinear:
    """``Y | x ~ N((1, f(x)) @ beta, sigma2)`` for a feature map ``f``."""

    beta: np.ndarray
    sigma2: float
    feature_map: Callable = identity_features
    name: str = "gaussian-linear"

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float).ravel()
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2!r}")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)

    def design(self, x) -> np.ndarray:
        feats = np.atleast_2d(self.feature_map(np.atleast_2d(np.asarray(x, dtype=float))))
        return np.column_stack([np.ones(feats.shape[0]), feats])

    def mean(self, x):
        mu = self.design(x) @ self.beta
        return float(mu[0]) if np.ndim(x) == 1 else mu

    def density(self, t, x) -> np.ndarray:
        """``p(t_j | x_i)`` as an (n, m) matrix."""
        mu = np.atleast_1d(self.design(x) @ self.beta)
        z = (np.asarray(t, dtype=float)[None, :] - mu[:, None]) / self.sigma
        return np.exp(-0.5 * z * z) / (self.sigma * math.sqrt(2 * math.pi))

    def tilted_moment(self, tilt: ExpTilt, x, upper: float | None = None):
        """Closed form of ``E{exp(a + bY) I(Y < upper) | x}``."""
        mu = np.atleast_1d(self.design(x) @ self.beta)
        a, b, s2 = tilt.intercept, tilt.slope, self.sigma2
        out = np.exp(a + b * mu + 0.5 * b * b * s2)
        if upper is not None:
            out = out * ndtr((upper - mu - b * s2) / self.sigma)
        return float(out[0]) if np.ndim(x) == 1 else out


@dataclass(frozen=True)
class FixedDensity:
    """A fully specified ``p*(t | x)`` supplied as a vectorized callable.

    ``density_fn(t, x)`` must return an (n, m) array for m nodes and n rows of x.
    """

    density_fn: Callable
    support: tuple[float, float]
    name: str = "fixed-density"

    def density(self, t, x) -> np.ndarray:
        return np.atleast_2d(np.asarray(self.density_fn(np.asarray(t, dtype=float), np.atleast_2d(x)), dtype=float))


def fit_gaussian_linear(sample, feature_map: Callable = identity_features) -> GaussianLinear:
    """Maximum-likelihood Gaussian linear model on the source rows (RSS / n1 variance).

    An exact fit (zero residual variance) is returned with ``sigma2`` clamped to
    the smallest positive double so the model stays constructible.
    """
    xs = sample.x[sample.r]
    feats = np.atleast_2d(feature_map(xs))
    design = np.column_stack([np.ones(feats.shape[0]), feats])
    n1, p = design.shape
    if n1 <= p:
        raise ValueError(f"need more than {p} source rows to fit {p} coefficients, got {n1}")
    if np.linalg.matrix_rank(design) < p:
        raise np.linalg.LinAlgError("rank-deficient design matrix for the Gaussian linear fit")
    beta, *_ = np.linalg.lstsq(design, sample.source_y, rcond=None)
    resid = sample.source_y - design @ beta
    sigma2 = float(resid @ resid) / n1
    return GaussianLinear(beta, max(sigma2, np.finfo(float).tiny), feature_map, name="fitted")


def paper_misspecified_model() -> GaussianLinear:
    return GaussianLinear(
        np.array([-7.000, -0.223, 0.363, 0.664]), 0.449, paper_features, name="paper-misspecified"
    )


def _as_callable(integrand):
    return integrand if callable(integrand) else (lambda t: np.full_like(t, float(integrand)))


def cond_expect(model, integrand, x, rule: QuadratureRule, upper: float | None = None, closed_form: bool = True):
    """``E*{f(Y) I(Y < upper) | x}`` under a working outcome model.

    ``x`` may be one d-vector (returns a float) or an (n, d) array.  Gaussian
    models with an :class:`ExpTilt` integrand use the closed form unless
    ``closed_form`` is false; everything else is integrated on ``rule``
    (restricted to ``[rule.a, upper]`` when ``upper`` is given).

    Raises :class:`TruncationError` when the model puts less than 0.99 of its
    mass inside the rule's interval at some x.
    """
    single = np.ndim(x) == 1
    if closed_form and isinstance(model, GaussianLinear) and isinstance(integrand, ExpTilt):
        return model.tilted_moment(integrand, x, upper)

    dens = model.density(rule.nodes, x)
    mass = dens @ rule.weights
    if np.any(mass < MIN_MASS):
        worst = int(np.argmin(mass))
        raise TruncationError(
            f"only {mass[worst]:.4f} of the working density lies in [{rule.a}, {rule.b}] at row {worst}"
        )
    f = _as_callable(integrand)
    if upper is None:
        out = dens @ (rule.weights * np.asarray(f(rule.nodes), dtype=float))
    elif upper <= rule.a:
        out = np.zeros(dens.shape[0])
    else:
        sub = remap(rule, rule.a, min(upper, rule.b))
        out = model.density(sub.nodes, x) @ (sub.weights * np.asarray(f(sub.nodes), dtype=float))
    if not np.all(np.isfinite(out)):
        raise ValueError("integrand is not finite on the quadrature nodes")
    return float(out[0]) if single else out


@dataclass
class NonparamRegressor:
    """Product-kernel Nadaraya-Watson estimate of ``E_p(. | x)`` over source rows.

    ``standardize`` rescales every covariate by its source-sample standard
    deviation before smoothing; off by default.
    """

    kernel: KernelSpec
    centers: np.ndarray
    standardize: bool = False
    scale: float | None = None

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        self._scale = self.centers.std(axis=0) if self.standardize else np.ones(self.centers.shape[1])
        if np.any(self._scale <= 0):
            raise ValueError("cannot standardize a constant covariate")

    @classmethod
    def from_sample(cls, sample, scale: float = 2.5, family: str = "gaussian", bandwidth: float | None = None,
                    standardize: bool = False) -> "NonparamRegressor":
        h = bandwidth if bandwidth is not None else default_bandwidth_multi(sample.n1, sample.d, scale)
        return cls(KernelSpec(family, h), sample.x[sample.r], standardize, None if bandwidth is not None else scale)

    def refit(self, sample) -> "NonparamRegressor":
        """Same smoother settings on another sample's source rows."""
        if self.scale is None:
            return NonparamRegressor(self.kernel, sample.x[sample.r], self.standardize)
        return NonparamRegressor.from_sample(sample, self.scale, self.kernel.family, standardize=self.standardize)

    def weights(self, x) -> np.ndarray:
        """(q, n1) matrix of smoothing weights at the query rows."""
        q = np.asarray(x, dtype=float)
        q = q.reshape(1, -1) if q.ndim == 1 else q
        return nw_weights_multi(self.kernel, self.centers / self._scale, q / self._scale)

    def expect(self, values_on_source, x):
        values = np.asarray(values_on_source, dtype=float)
        if values.shape[0] != self.centers.shape[0]:
            raise ValueError("values must be given on every source row")
        out = self.weights(x) @ values
        return float(out[0]) if np.ndim(x) == 1 else out


def nonparam_cond_expect(regressor: NonparamRegressor, values_on_source, x):
    return regressor.expect(values_on_source, x)


def weights_w(ratio: DensityRatioModel, model, sample, rule: QuadratureRule | None = None,
              closed_form: bool = True, smoother: np.ndarray | None = None) -> np.ndarray:
    """``w_i = 1 / (E{rho*^2 | x_i} + pi / (1 - pi) E{rho* | x_i})`` for every row.

    ``model`` is a parametric working model (expectations via :func:`cond_expect`)
    or a :class:`NonparamRegressor` (expectations as smoothed source averages).
    A precomputed (n, n1) smoother matrix may be passed for the latter.
    """
    odds = sample.pi / (1.0 - sample.pi)
    if isinstance(model, NonparamRegressor):
        rho_src = ratio(sample.source_y)
        smoother = model.weights(sample.x) if smoother is None else smoother
        denom = smoother @ (rho_src ** 2 + odds * rho_src)
    else:
        if rule is None:
            raise ValueError("a quadrature rule is needed for parametric working models")
        e2 = cond_expect(model, ratio.power(2), sample.x, rule, closed_form=closed_form)
        e1 = cond_expect(model, ratio.power(1), sample.x, rule, closed_form=closed_form)
        denom = np.asarray(e2) + odds * np.asarray(e1)
    denom = np.atleast_1d(denom)
    if not np.all(np.isfinite(denom)) or np.any(denom <= 0):
        raise ValueError("non-positive or non-finite weight denominator; check the ratio model")
    return 1.0 / denom
