"""Quadrature rules on finite intervals.

Every ``dt`` integral in the package (conditional expectations under a
parametric outcome model, the Fredholm discretization) goes through a
:class:`QuadratureRule`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["QuadratureRule", "gauss_legendre", "trapezoid", "integrate", "remap"]


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and positive weights on ``[a, b]``."""

    nodes: np.ndarray
    weights: np.ndarray
    a: float
    b: float

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if nodes.ndim != 1 or nodes.shape != weights.shape or nodes.size == 0:
            raise ValueError("nodes and weights must be non-empty 1-d arrays of equal length")
        if not self.a < self.b:
            raise ValueError(f"interval must satisfy a < b, got [{self.a}, {self.b}]")
        if np.any(weights <= 0):
            raise ValueError("quadrature weights must be positive")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("quadrature nodes must be strictly increasing")
        nodes.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @property
    def m(self) -> int:
        return self.nodes.size

    @property
    def interval(self) -> tuple[float, float]:
        return (self.a, self.b)


def _legendre_and_derivative(x: np.ndarray, m: int):
    p0 = np.ones_like(x)
    p1 = x.copy()
    for k in range(2, m + 1):
        p0, p1 = p1, ((2 * k - 1) * x * p1 - (k - 1) * p0) / k
    return p1, m * (x * p1 - p0) / (x * x - 1.0)


def _legendre_nodes(m: int, tol: float = 1e-15, max_iter: int = 100):
    """Gauss-Legendre nodes/weights on [-1, 1] for m >= 2 by Newton's method.

    Initial guess ``cos(pi (i - 1/4) / (m + 1/2))``; P_m and P_m' come from
    the three-term recurrence.
    """
    i = np.arange(1, m + 1)
    x = np.cos(np.pi * (i - 0.25) / (m + 0.5))
    for _ in range(max_iter):
        p, dp = _legendre_and_derivative(x, m)
        dx = p / dp
        x = x - dx
        if np.max(np.abs(dx)) <= tol:
            break
    _, dp = _legendre_and_derivative(x, m)
    w = 2.0 / ((1.0 - x * x) * dp * dp)
    # the cosine guess orders nodes from right to left
    return x[::-1].copy(), w[::-1].copy()


def gauss_legendre(m: int, a: float = -5.0, b: float = 5.0) -> QuadratureRule:
    """m-point Gauss-Legendre rule mapped affinely onto ``[a, b]``.

    Exact for polynomials of degree ``2m - 1``.

    >>> rule = gauss_legendre(2, -1.0, 1.0)
    >>> rule.nodes.round(6)
    array([-0.57735,  0.57735])
    """
    if int(m) != m or m < 1:
        raise ValueError(f"m must be a positive integer, got {m!r}")
    if not a < b:
        raise ValueError(f"interval must satisfy a < b, got [{a}, {b}]")
    m = int(m)
    if m == 1:
        x, w = np.zeros(1), np.full(1, 2.0)
    else:
        x, w = _legendre_nodes(m)
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    return QuadratureRule(mid + half * x, half * w, float(a), float(b))


def trapezoid(m: int, a: float, b: float) -> QuadratureRule:
    """Composite trapezoid rule on ``m`` equally spaced points including endpoints.

    The endpoints are nodes here, so the "nodes inside (a, b)" property of
    Gauss rules does not hold for this constructor.
    """
    if int(m) != m or m < 2:
        raise ValueError("trapezoid rule needs m >= 2")
    if not a < b:
        raise ValueError(f"interval must satisfy a < b, got [{a}, {b}]")
    nodes = np.linspace(a, b, int(m))
    step = (b - a) / (m - 1)
    weights = np.full(int(m), step)
    weights[[0, -1]] = 0.5 * step
    return QuadratureRule(nodes, weights, float(a), float(b))


def integrate(rule: QuadratureRule, f) -> float:
    """``sum_i w_i f(t_i)``; ``f`` is evaluated once on the node vector."""
    values = np.asarray(f(rule.nodes), dtype=float)
    if values.shape == ():
        values = np.full(rule.m, float(values))
    if not np.all(np.isfinite(values)):
        raise ValueError("integrand is not finite on every quadrature node")
    return float(values @ rule.weights)


def remap(rule: QuadratureRule, a: float, b: float) -> QuadratureRule:
    """Same rule shape moved affinely onto ``[a, b]``."""
    scale = (b - a) / (rule.b - rule.a)
    return QuadratureRule(a + (rule.nodes - rule.a) * scale, rule.weights * scale, a, b)

