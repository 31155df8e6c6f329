"""Kernel weights and Nadaraya-Watson regression.

The one-dimensional smoother estimates ``E(. | y)`` over the source outcomes;
the product-kernel smoother estimates ``E_p(. | x)`` for the singly flexible
estimator.  Weight matrices are computed in log space and normalized row by
row, so only a genuinely empty neighbourhood (total kernel mass below
``DENOMINATOR_FLOOR``) is reported as degenerate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "DENOMINATOR_FLOOR",
    "DegenerateQueryError",
    "KernelSpec",
    "kernel_weight",
    "nw_weights_1d",
    "nw_weights_multi",
    "nw_regress_1d",
    "nw_regress_multi",
    "default_bandwidth_1d",
    "default_bandwidth_multi",
]

DENOMINATOR_FLOOR = 1e-300
_LOG_FLOOR = math.log(DENOMINATOR_FLOOR)
_FAMILIES = ("gaussian", "epanechnikov")


class DegenerateQueryError(ValueError):
    """A Nadaraya-Watson query has (numerically) no kernel mass."""


@dataclass(frozen=True)
class KernelSpec:
    family: str = "gaussian"
    bandwidth: float = 1.0

    def __post_init__(self):
        family = self.family.lower()
        if family not in _FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}; expected one of {_FAMILIES}")
        object.__setattr__(self, "family", family)
        h = float(self.bandwidth)
        if not (math.isfinite(h) and h > 0):
            raise ValueError(f"bandwidth must be positive and finite, got {self.bandwidth!r}")
        object.__setattr__(self, "bandwidth", h)

    def with_bandwidth(self, h: float) -> "KernelSpec":
        return KernelSpec(self.family, h)


def _log_kernel(family: str, v: np.ndarray) -> np.ndarray:
    """log K(v) for the unscaled kernel; ``-inf`` outside the support."""
    if family == "gaussian":
        return -0.5 * v * v - 0.5 * math.log(2 * math.pi)
    inside = np.abs(v) < 1.0
    with np.errstate(divide="ignore"):
        return np.where(inside, np.log(0.75 * np.clip(1.0 - v * v, 0.0, None)), -np.inf)


def kernel_weight(spec: KernelSpec, u):
    """``K(u / h) / h`` for the family and bandwidth in ``spec``."""
    u = np.asarray(u, dtype=float)
    h = spec.bandwidth
    out = np.exp(_log_kernel(spec.family, u / h)) / h
    return float(out) if out.ndim == 0 else out


def _normalize_log_weights(logk: np.ndarray) -> np.ndarray:
    logden = logsumexp(logk, axis=1, keepdims=True)
    bad = ~(logden[:, 0] >= _LOG_FLOOR)
    if np.any(bad):
        first = int(np.nonzero(bad)[0][0])
        raise DegenerateQueryError(
            f"kernel mass below {DENOMINATOR_FLOOR:g} at query {first} "
            f"({int(bad.sum())} degenerate queries in total)"
        )
    return np.exp(logk - logden)


def _masked_centers(centers, values, mask):
    centers = np.asarray(centers, dtype=float)
    n = centers.shape[0]
    keep = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if keep.shape != (n,):
        raise ValueError("mask length must match the number of centers")
    if not keep.any():
        raise ValueError("no masked-in centers")
    if values is not None:
        values = np.asarray(values, dtype=float)
        if values.shape[0] != n:
            raise ValueError("values and centers must have the same length")
        values = values[keep]
    return centers[keep], values


def nw_weights_1d(spec: KernelSpec, centers, queries, mask=None) -> np.ndarray:
    """Row-stochastic matrix ``W[q, i] = K_h(query_q - c_i) / sum_j K_h(query_q - c_j)``.

    Columns correspond to the masked-in centers only.
    """
    c, _ = _masked_centers(centers, None, mask)
    q = np.atleast_1d(np.asarray(queries, dtype=float))
    logk = _log_kernel(spec.family, (q[:, None] - c[None, :]) / spec.bandwidth)
    logk = logk - math.log(spec.bandwidth)
    return _normalize_log_weights(logk)


def _as_design(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def nw_weights_multi(spec: KernelSpec, centers, queries, mask=None) -> np.ndarray:
    """Product-kernel analogue of :func:`nw_weights_1d` with one shared bandwidth.

    ``queries`` is an (q, d) array; a single d-vector is accepted as well.
    """
    c, _ = _masked_centers(_as_design(centers), None, mask)
    q = np.asarray(queries, dtype=float)
    q = q.reshape(1, -1) if q.ndim <= 1 else q
    if q.shape[1] != c.shape[1]:
        raise ValueError(f"query dimension {q.shape[1]} does not match centers {c.shape[1]}")
    h = spec.bandwidth
    logk = np.zeros((q.shape[0], c.shape[0]))
    for k in range(c.shape[1]):
        logk += _log_kernel(spec.family, (q[:, k, None] - c[None, :, k]) / h)
    logk -= c.shape[1] * math.log(h)
    return _normalize_log_weights(logk)


def nw_regress_1d(spec: KernelSpec, centers, values, mask, query):
    """Nadaraya-Watson estimate at ``query`` (scalar or vector of queries).

    >>> nw_regress_1d(KernelSpec("gaussian", 1.0), [-1.0, 1.0], [0.0, 2.0], None, 0.0)
    1.0
    """
    _, v = _masked_centers(centers, values, mask)
    out = nw_weights_1d(spec, centers, query, mask) @ v
    return float(out[0]) if np.ndim(query) == 0 else out


def nw_regress_multi(spec: KernelSpec, centers, values, mask, query):
    """Product-kernel Nadaraya-Watson estimate at one d-vector or an (q, d) array."""
    _, v = _masked_centers(_as_design(centers), values, mask)
    query = np.asarray(query, dtype=float)
    out = nw_weights_multi(spec, centers, query, mask) @ v
    return float(out[0]) if query.ndim <= 1 else out


def default_bandwidth_1d(n1: int) -> float:
    """``n1 ** (-1/3)``, which meets both rate conditions when pi stays away from 0."""
    if n1 < 1:
        raise ValueError("n1 must be a positive integer")
    return float(n1) ** (-1.0 / 3.0)


def default_bandwidth_multi(n1: int, d: int, scale: float = 2.5) -> float:
    """``scale * n1 ** (-1 / (4 + d))``."""
    if n1 < 1:
        raise ValueError("n1 must be a positive integer")
    if d < 1:
        raise ValueError("covariate dimension d must be at least 1")
    if not scale > 0:
        raise ValueError("scale must be positive")
    return scale * float(n1) ** (-1.0 / (4.0 + d))
