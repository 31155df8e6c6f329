"""Discretized Fredholm equations of the first kind and Landweber iteration.

Both flexible estimators reduce to a linear system ``Phi (a * w) = target``
where ``w`` is a vector of quadrature weights (Gauss-Legendre weights for the
doubly flexible path, ones for the sample-point discretization of the singly
flexible path).  With ``u = a * sqrt(w)`` and ``B = Phi diag(sqrt(w))`` the
Landweber update

    a <- a + step * Phi^T target - step * Phi^T Phi (a * w)

is plain Landweber on ``B u = target``, so the k-th iterate has a closed form
in the singular value decomposition of ``B``.  :func:`landweber_solve` uses it
by default (``method="spectral"``) and stops at exactly the iteration where the
step-by-step loop (``method="loop"``) would.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .kernels import KernelSpec, default_bandwidth_1d, nw_weights_1d

__all__ = [
    "DiscretizedFredholm",
    "SolveDiagnostics",
    "DivergenceError",
    "SpectralFactorization",
    "evaluation_points",
    "build_doubly_kernel",
    "build_singly_kernel",
    "general_u_target",
    "landweber_solve",
    "power_sigma_max",
]

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 50_000
DIVERGENCE_FACTOR = 1e3
_GUARD_EPS = 1e-12
_CHUNK = 2048


class DivergenceError(RuntimeError):
    """Landweber iterates blew up; ``diagnostics`` describes the last sane state."""

    def __init__(self, message: str, diagnostics: "SolveDiagnostics"):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class SolveDiagnostics:
    iterations: int
    final_rel_change: float
    final_residual_norm: float
    converged: bool
    step: float = math.nan
    method: str = "spectral"

    def as_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "final_rel_change": self.final_rel_change,
            "final_residual_norm": self.final_residual_norm,
            "converged": self.converged,
            "step": self.step,
            "method": self.method,
        }


@dataclass(frozen=True, eq=False)
class DiscretizedFredholm:
    """The system ``Phi (a * quad_weights) = target``.

    Parameters
    ----------
    phi : (l, m) array
    target : (l,) array
    quad_weights : (m,) array of positive floats
    step : float, optional
        Landweber step; ``None`` means ``1 / l``.
    tol : float
        Bound on ``||a_{k+1} - a_k||^2 / ||a_k||^2``.
    max_iter : int
    spectral_guard : bool
        Replace the step by ``1 / (sigma_max(Phi diag(sqrt(w)))^2 + eps)``,
        with ``sigma_max`` from 30 power iterations.
    eval_points : (l,) array, optional
        The outcome values the rows were evaluated at.
    """

    phi: np.ndarray
    target: np.ndarray
    quad_weights: np.ndarray
    step: float | None = None
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    spectral_guard: bool = False
    eval_points: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        phi = np.atleast_2d(np.asarray(self.phi, dtype=float))
        target = np.asarray(self.target, dtype=float).ravel()
        qw = np.asarray(self.quad_weights, dtype=float).ravel()
        l, m = phi.shape
        if l < 1 or m < 1:
            raise ValueError("phi must have at least one row and one column")
        if target.shape != (l,):
            raise ValueError(f"target must have length {l}, got {target.shape}")
        if qw.shape != (m,):
            raise ValueError(f"quad_weights must have length {m}, got {qw.shape}")
        if np.any(qw <= 0):
            raise ValueError("quad_weights must be positive")
        if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(target)) and np.all(np.isfinite(qw))):
            raise ValueError("phi, target and quad_weights must be finite")
        if self.step is not None and not (self.step > 0 and math.isfinite(self.step)):
            raise ValueError("step must be positive and finite")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if int(self.max_iter) != self.max_iter or self.max_iter < 1:
            raise ValueError("max_iter must be a positive integer")
        for name, arr in (("phi", phi), ("target", target), ("quad_weights", qw)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def l(self) -> int:
        return self.phi.shape[0]

    @property
    def m(self) -> int:
        return self.phi.shape[1]

    @property
    def scaled_operator(self) -> np.ndarray:
        """``Phi diag(sqrt(w))``, the operator Landweber actually iterates with."""
        return self.phi * np.sqrt(self.quad_weights)[None, :]

    def resolved_step(self) -> float:
        if self.spectral_guard:
            return 1.0 / (power_sigma_max(self.scaled_operator) ** 2 + _GUARD_EPS)
        return 1.0 / self.l if self.step is None else float(self.step)

    def with_target(self, target) -> "DiscretizedFredholm":
        return replace(self, target=np.asarray(target, dtype=float))

    def with_solver(self, **kwargs) -> "DiscretizedFredholm":
        return replace(self, **kwargs)


def power_sigma_max(b: np.ndarray, iters: int = 30) -> float:
    """Largest singular value of ``b`` by power iteration on ``b^T b``."""
    v = np.ones(b.shape[1]) / math.sqrt(b.shape[1])
    s = 0.0
    for _ in range(iters):
        z = b.T @ (b @ v)
        nz = float(np.linalg.norm(z))
        if nz == 0.0:
            return 0.0
        v = z / nz
        s = nz
    return math.sqrt(s)


@dataclass(frozen=True, eq=False)
class SpectralFactorization:
    """Thin SVD of ``Phi diag(sqrt(w))``, reusable across right-hand sides."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray
    sqrt_w: np.ndarray

    @classmethod
    def of(cls, problem: DiscretizedFredholm) -> "SpectralFactorization":
        u, s, vt = np.linalg.svd(problem.scaled_operator, full_matrices=False)
        return cls(u, s, vt, np.sqrt(problem.quad_weights))

    def matches(self, problem: DiscretizedFredholm) -> bool:
        return self.vt.shape[1] == problem.m and self.u.shape[0] == problem.l


def _diag(iterations, rel, resid, converged, step, method):
    return SolveDiagnostics(int(iterations), float(rel), float(resid), bool(converged), float(step), method)


def landweber_solve(problem: DiscretizedFredholm, a0=None, method: str = "spectral",
                    factorization: SpectralFactorization | None = None):
    """Landweber iteration with the relative-change stopping rule.

    Iterates until ``||a_{k+1} - a_k||^2 <= tol * ||a_k||^2`` (or
    ``||a_{k+1}||^2 <= tol`` while ``a_k = 0``) or ``max_iter`` steps.

    Parameters
    ----------
    problem : DiscretizedFredholm
    a0 : (m,) array, optional
        Starting point, zero by default.
    method : {"spectral", "loop"}
        Closed-form iterates from an SVD, or the literal update loop.  Both
        return the same iterate up to rounding.
    factorization : SpectralFactorization, optional
        Precomputed SVD for ``problem``'s operator.

    Returns
    -------
    a_hat : (m,) array
    diagnostics : SolveDiagnostics

    Raises
    ------
    DivergenceError
        When an iterate is non-finite, the relative change exceeds 1e3 times
        its running minimum, or ``||u_k - u_0|| > k ||u_1 - u_0||`` in the
        scaled variable ``u = a * sqrt(w)`` (impossible while ``step *
        sigma_max^2 <= 2``).
    """
    a0 = np.zeros(problem.m) if a0 is None else np.asarray(a0, dtype=float).copy()
    if a0.shape != (problem.m,):
        raise ValueError(f"a0 must have length {problem.m}")
    step = problem.resolved_step()
    if method == "loop":
        return _landweber_loop(problem, a0, step)
    if method != "spectral":
        raise ValueError(f"unknown method {method!r}")
    fac = factorization if factorization is not None else SpectralFactorization.of(problem)
    if not fac.matches(problem):
        raise ValueError("factorization does not match the problem's dimensions")
    return _landweber_spectral(problem, a0, step, fac)


def _residual(problem, a):
    return float(np.linalg.norm(problem.phi @ (a * problem.quad_weights) - problem.target))


def _landweber_loop(problem: DiscretizedFredholm, a0: np.ndarray, step: float):
    phi, qw, tol = problem.phi, problem.quad_weights, problem.tol
    sq = np.sqrt(qw)
    gram = phi.T @ phi
    drive = step * (phi.T @ problem.target)
    a = a0
    u0 = a0 * sq
    first_jump = None
    running_min = math.inf
    rel = math.inf
    for k in range(problem.max_iter):
        a_next = a + drive - step * (gram @ (a * qw))
        num = float(np.sum((a_next - a) ** 2))
        den = float(np.sum(a * a))
        rel = num / den if den > 0 else num
        jump = float(np.linalg.norm(a_next * sq - u0))
        if first_jump is None:
            first_jump = jump
        reason = None
        if not np.all(np.isfinite(a_next)) or not math.isfinite(rel):
            reason = "non-finite iterate"
        elif jump > (k + 1) * first_jump * (1 + 1e-9) + 1e-300:
            reason = "iterates left the Landweber envelope (step too large)"
        elif den > 0 and rel > DIVERGENCE_FACTOR * running_min:
            reason = "relative change grew by more than 1e3 from its minimum"
        if reason is not None:
            raise DivergenceError(
                f"Landweber solver diverged at iteration {k + 1}: {reason}; step={step:.3g}",
                _diag(k, running_min, _residual(problem, a), False, step, "loop"),
            )
        if den > 0:
            running_min = min(running_min, rel)
        a = a_next
        if rel <= tol:
            return a, _diag(k + 1, rel, _residual(problem, a), True, step, "loop")
    return a, _diag(problem.max_iter, rel, _residual(problem, a), False, step, "loop")


class _ClosedForm:
    """Iterate k in coefficients: ``u_k = V (c0 + g_k * d) + perp``, ``u_{k+1} - u_k = V (f^k d)``."""

    def __init__(self, problem, a0, step, fac: SpectralFactorization):
        sq = fac.sqrt_w
        u0 = a0 * sq
        self.c0 = fac.vt @ u0
        self.perp = u0 - fac.vt.T @ self.c0
        beta = fac.u.T @ problem.target
        s2 = fac.s ** 2
        self.d = step * fac.s * (beta - fac.s * self.c0)
        self.f = 1.0 - step * s2
        self.tiny = step * s2 < 1e-14
        self.minv = fac.vt / sq[None, :]
        self.unit = bool(np.all(sq == sq[0]))
        self.w0 = float(sq[0] ** 2)
        self.perp_a = self.perp / sq
        self.sq = sq
        self.d_norm = float(np.linalg.norm(self.d))

    def terms(self, ks: np.ndarray):
        k = ks[:, None].astype(float)
        with np.errstate(over="ignore", invalid="ignore"):
            fk = self.f[None, :] ** k
            g = np.where(self.tiny[None, :], k, (1.0 - fk) / np.where(self.tiny, 1.0, 1.0 - self.f)[None, :])
            coef = self.c0[None, :] + g * self.d[None, :]
            step_coef = fk * self.d[None, :]
            if self.unit:
                num = np.sum(step_coef ** 2, axis=1) / self.w0
                den = (np.sum(coef ** 2, axis=1) + float(self.perp @ self.perp)) / self.w0
            else:
                num = np.sum((step_coef @ self.minv) ** 2, axis=1)
                den = np.sum((coef @ self.minv + self.perp_a) ** 2, axis=1)
            jump = np.sqrt(np.sum(((g + fk) * self.d[None, :]) ** 2, axis=1))
        return coef, step_coef, num, den, jump

    def iterate(self, coef_row) -> np.ndarray:
        return coef_row @ self.minv + self.perp_a


def _landweber_spectral(problem: DiscretizedFredholm, a0, step, fac: SpectralFactorization):
    cf = _ClosedForm(problem, a0, step, fac)
    if bool(np.all((cf.f >= 0) & (cf.f <= 1))):
        # contractive regime: no divergence is possible, so only the stopping index is needed
        if cf.unit and not np.any(a0):
            k, converged = _first_pass_bisect(cf, problem.tol, problem.max_iter)
        else:
            k, converged = _first_pass_grid(cf, problem.tol, problem.max_iter)
        coef, step_coef, num, den, _ = cf.terms(np.array([k]))
        a = cf.iterate(coef[0] + step_coef[0])
        return a, _diag(k + 1, _rel(num, den)[0], _residual(problem, a), converged, step, "spectral")
    return _spectral_scan(problem, cf, a0, step)


def _rel(num, den):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / den, num)


def _rel_batch(cf: _ClosedForm, ks) -> np.ndarray:
    out = np.empty(len(ks))
    for start in range(0, len(ks), _CHUNK):
        chunk = np.asarray(ks[start:start + _CHUNK])
        _, _, num, den, _ = cf.terms(chunk)
        out[start:start + _CHUNK] = _rel(num, den)
    return out


def _first_pass_bisect(cf: _ClosedForm, tol, max_iter):
    """Exact when the relative change is non-increasing (zero start, constant weights).

    The numerator is a sum of terms ``f_i^(2k) d_i^2`` and the denominator a sum
    of terms ``g_k,i^2 d_i^2`` with ``g`` increasing in k.
    """
    def passes(k):
        return _rel_batch(cf, [k])[0] <= tol

    last = max_iter - 1
    if passes(0):
        return 0, True
    hi = 1
    while hi < last and not passes(hi):
        hi = min(2 * hi, last)
    if not passes(hi):
        return last, False
    lo = hi // 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if passes(mid):
            hi = mid
        else:
            lo = mid
    return hi, True


def _first_pass_grid(cf: _ClosedForm, tol, max_iter):
    """First passing iteration via a 1% geometric grid refined by a full scan.

    Every component of the iterate varies smoothly and monotonically in k here,
    so the grid cannot step over a crossing unless the relative change dips
    below ``tol`` and recovers within 1% of the iteration count.
    """
    last = max_iter - 1
    grid = np.unique(np.concatenate([
        np.arange(min(64, max_iter)),
        np.round(np.geomspace(64, max(last, 64), num=max(2, int(math.log(max(last, 64) / 64) / math.log(1.01)) + 2))),
    ]).astype(np.int64))
    grid = grid[grid <= last]
    rel = _rel_batch(cf, grid)
    hits = np.nonzero(rel <= tol)[0]
    if hits.size == 0:
        return last, False
    g = int(hits[0])
    if g == 0:
        return int(grid[0]), True
    window = np.arange(int(grid[g - 1]) + 1, int(grid[g]) + 1)
    first = int(np.nonzero(_rel_batch(cf, window) <= tol)[0][0])
    return int(window[first]), True


def _spectral_scan(problem: DiscretizedFredholm, cf: _ClosedForm, a0, step):
    """Iteration-by-iteration check; used when some component may grow."""
    tol, max_iter = problem.tol, problem.max_iter
    running_min = math.inf
    k0 = 0
    while k0 < max_iter:
        ks = np.arange(k0, min(k0 + _CHUNK, max_iter))
        coef, step_coef, num, den, jump = cf.terms(ks)
        rel = _rel(num, den)
        with np.errstate(invalid="ignore"):
            bad_value = ~np.isfinite(rel) | ~np.all(np.isfinite(coef + step_coef), axis=1)
        # jump is ||u_{k+1} - u_0||, bounded by (k + 1) ||u_1 - u_0|| in the convergent regime
        bad_envelope = ~(jump <= (ks + 1) * cf.d_norm * (1 + 1e-9) + 1e-300)
        rel_pos = np.where(den > 0, rel, np.inf)
        prev_min = np.minimum.accumulate(np.concatenate([[running_min], rel_pos[:-1]]))
        bad_growth = (den > 0) & (rel > DIVERGENCE_FACTOR * prev_min)
        stop = rel <= tol
        bad = bad_value | bad_envelope | bad_growth
        events = np.nonzero(bad | stop)[0]
        if events.size:
            j = int(events[0])
            if bad[j]:
                reason = ("non-finite iterate" if bad_value[j] else
                          "iterates left the Landweber envelope (step too large)" if bad_envelope[j] else
                          "relative change grew by more than 1e3 from its minimum")
                last = cf.iterate(coef[j]) if np.all(np.isfinite(coef[j])) else a0
                resid = _residual(problem, last) if np.all(np.isfinite(last)) else math.inf
                raise DivergenceError(
                    f"Landweber solver diverged at iteration {int(ks[j]) + 1}: {reason}; step={step:.3g}",
                    _diag(ks[j], float(prev_min[j]), resid, False, step, "spectral"),
                )
            a = cf.iterate(coef[j] + step_coef[j])
            return a, _diag(ks[j] + 1, rel[j], _residual(problem, a), True, step, "spectral")
        running_min = min(running_min, float(np.min(rel_pos)))
        k0 = int(ks[-1]) + 1
    coef, step_coef, num, den, _ = cf.terms(np.array([max_iter - 1]))
    a = cf.iterate(coef[0] + step_coef[0])
    return a, _diag(max_iter, _rel(num, den)[0], _residual(problem, a), False, step, "spectral")


# ---------------------------------------------------------------- kernel builders


def evaluation_points(source_y) -> np.ndarray:
    """Distinct source outcomes in order of first appearance."""
    y = np.asarray(source_y, dtype=float)
    _, first = np.unique(y, return_index=True)
    return y[np.sort(first)]


def _solver_kwargs(solver: dict | None) -> dict:
    allowed = {"step", "tol", "max_iter", "spectral_guard"}
    solver = dict(solver or {})
    unknown = set(solver) - allowed
    if unknown:
        raise ValueError(f"unknown solver options {sorted(unknown)}")
    return solver


def build_doubly_kernel(sample, ratio, cond_model, kernel_spec: KernelSpec | None, rule, w=None, target=None,
                        solver: dict | None = None, dens=None) -> DiscretizedFredholm:
    """Kernel matrix for the doubly flexible path.

    ``Phi[l, j] = rho*(t_j) sum_i NW_i(y_l) w_i p*(t_j | x_i)`` over source
    units i, with evaluation points ``y_l`` the distinct source outcomes and
    ``t_j`` the rule's nodes.  The default target is ``y_l`` itself (the mean);
    pass ``target`` (length l) for other estimating functions.

    ``w`` and the (n, m) density matrix ``dens`` may be supplied to avoid
    recomputation.
    """
    from .models import weights_w

    spec = kernel_spec or KernelSpec("gaussian", default_bandwidth_1d(sample.n1))
    if w is None:
        w = weights_w(ratio, cond_model, sample, rule)
    w = np.asarray(w, dtype=float)
    ys = sample.source_y
    pts = evaluation_points(ys)
    nw = nw_weights_1d(spec, ys, pts)
    if dens is None:
        dens_src = cond_model.density(rule.nodes, sample.x[sample.r])
    else:
        dens_src = np.asarray(dens)[sample.r]
    phi = (nw @ (w[sample.r][:, None] * dens_src)) * ratio(rule.nodes)[None, :]
    return DiscretizedFredholm(phi, pts if target is None else target, rule.weights,
                               eval_points=pts, **_solver_kwargs(solver))


def build_singly_kernel(sample, ratio, regressor, kernel_spec: KernelSpec | None, w=None, smoother=None,
                        target=None, solver: dict | None = None) -> DiscretizedFredholm:
    """Sample-point kernel matrix for the singly flexible path.

    ``Phi[l, k] = rho*(y_k) sum_i NW_i(y_l) w_i W_k(x_i)`` where ``W_k(x)`` is
    the covariate smoother's weight on source unit k.  The unknowns are
    ``a*(y_k)`` at the source outcomes and the quadrature weights are ones.
    ``smoother`` is the (n, n1) matrix ``W_k(x_i)`` if already computed.
    """
    from .models import weights_w

    spec = kernel_spec or KernelSpec("gaussian", default_bandwidth_1d(sample.n1))
    if smoother is None:
        smoother = regressor.weights(sample.x)
    if w is None:
        w = weights_w(ratio, regressor, sample, smoother=smoother)
    w = np.asarray(w, dtype=float)
    ys = sample.source_y
    pts = evaluation_points(ys)
    nw = nw_weights_1d(spec, ys, pts)
    phi = (nw @ (w[sample.r][:, None] * smoother[sample.r])) * ratio(ys)[None, :]
    return DiscretizedFredholm(phi, pts if target is None else target, np.ones(sample.n1),
                               eval_points=pts, **_solver_kwargs(solver))


def general_u_target(nw: np.ndarray, u_at_points, w_src, cond_u_rho2_src) -> np.ndarray:
    """Right-hand side for an estimating function ``U`` free of x.

    ``v(y_l) = U(y_l) - sum_i NW_i(y_l) w_i E*{U(Y) rho*^2(Y) | x_i}``: the
    smoothed form with both sides divided by the kernel denominator.
    """
    return np.asarray(u_at_points, dtype=float) - nw @ (np.asarray(w_src) * np.asarray(cond_u_rho2_src))
