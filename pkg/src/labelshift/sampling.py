"""The stacked two-population sample, CSV input/output, and synthetic designs.

Units with ``r = 1`` come from the source population P and carry an outcome;
units with ``r = 0`` come from the target population Q and do not.  Missing
outcomes are stored as NaN in :attr:`StackedSample.y`, a read-only array.
Estimators only ever touch :attr:`StackedSample.source_y`, so a target-side
value cannot enter a computation by accident.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import IO, Sequence

import numpy as np
from scipy.special import ndtri

__all__ = [
    "StackedSample",
    "SyntheticSample",
    "SchemaError",
    "load_csv",
    "write_csv",
    "generate_paper_design",
    "true_density_ratio",
    "true_conditional_model",
    "example1_target_marginal",
    "example1_q_y",
    "mix_seed",
]


class SchemaError(ValueError):
    """CSV header or row content does not match the stacked-sample layout."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class StackedSample:
    """Covariates for every unit, outcomes for source units only.

    Parameters
    ----------
    x : (n, d) array_like
        Covariates; every entry finite.
    r : (n,) array_like of {0, 1}
        Population indicator, 1 for the source population.
    y : (n,) array_like
        Outcomes, NaN exactly where ``r == 0``.
    """

    x: np.ndarray
    r: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        r_raw = np.asarray(self.r)
        if r_raw.dtype != bool and not np.all(np.isin(r_raw, (0, 1))):
            raise ValueError("r must contain only 0 and 1")
        r = r_raw.astype(bool)
        y = np.asarray(self.y, dtype=float)
        n = r.shape[0]
        if r.ndim != 1 or x.ndim != 2 or x.shape[0] != n or y.shape != (n,):
            raise ValueError("x must be (n, d) and r, y length n")
        if x.shape[1] < 1:
            raise ValueError("need at least one covariate")
        if not np.all(np.isfinite(x)):
            raise ValueError("covariates must be finite")
        if np.any(np.isnan(y[r])) or np.any(~np.isfinite(y[r])):
            raise ValueError("every source unit (r = 1) needs a finite outcome")
        if not np.all(np.isnan(y[~r])):
            raise ValueError("target units (r = 0) must not carry an outcome")
        n1 = int(r.sum())
        if n1 == 0 or n1 == n:
            raise ValueError(f"both populations must be present, got n1={n1}, n0={n - n1}")
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "r", _readonly(r))
        object.__setattr__(self, "y", _readonly(y))

    @classmethod
    def from_source(cls, x, r, source_y) -> "StackedSample":
        """Build from the outcomes of the source rows only, in row order."""
        r = np.asarray(r).astype(bool)
        y = np.full(r.shape[0], np.nan)
        y[r] = np.asarray(source_y, dtype=float)
        return cls(x, r, y)

    @property
    def n(self) -> int:
        return self.r.shape[0]

    @property
    def n1(self) -> int:
        return int(self.r.sum())

    @property
    def n0(self) -> int:
        return self.n - self.n1

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def pi(self) -> float:
        return self.n1 / self.n

    @property
    def source_y(self) -> np.ndarray:
        return self.y[self.r]

    def y_or(self, fill: float) -> np.ndarray:
        """Outcome vector with target entries replaced by ``fill``."""
        return np.where(self.r, self.y, fill)

    def take(self, index) -> "StackedSample":
        index = np.asarray(index)
        return StackedSample(self.x[index], self.r[index], self.y[index])


@dataclass(frozen=True, eq=False)
class SyntheticSample:
    """A stacked sample plus the target outcomes a real study never sees."""

    sample: StackedSample
    hidden_target_y: np.ndarray
    truth: dict = field(default_factory=dict)

    def __post_init__(self):
        hidden = np.asarray(self.hidden_target_y, dtype=float)
        if hidden.shape != (self.sample.n0,):
            raise ValueError(f"hidden_target_y needs {self.sample.n0} entries, got {hidden.shape}")
        object.__setattr__(self, "hidden_target_y", _readonly(hidden))

    @property
    def theta_mean(self) -> float:
        return self.truth["theta_mean"]

    def theta_quantile(self, level: float) -> float:
        known = self.truth.get("theta_quantiles", {})
        if level in known:
            return known[level]
        if "target_normal" in self.truth:
            loc, scale = self.truth["target_normal"]
            return float(loc + scale * ndtri(level))
        raise KeyError(f"no true quantile recorded at level {level}")


# ---------------------------------------------------------------- CSV


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise SchemaError(f"row {row}: column {col!r} is not a number: {cell!r}") from None
    if not math.isfinite(v):
        raise SchemaError(f"row {row}: column {col!r} is not finite")
    return v


def _x_columns(header: Sequence[str]) -> list[str]:
    xcols = [h for h in header if h.startswith("x") and h[1:].isdigit()]
    expected = [f"x{k}" for k in range(1, len(xcols) + 1)]
    if not xcols or sorted(xcols, key=lambda h: int(h[1:])) != expected:
        raise SchemaError(f"covariate columns must be x1..xd, found {xcols}")
    return expected


def _read_rows(text: IO[str]):
    reader = csv.reader(text)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise SchemaError("empty input") from None
    for col in ("r", "y"):
        if col not in header:
            raise SchemaError(f"header must contain column {col!r}")
    unknown = set(header) - {"r", "y", "y_hidden"} - {h for h in header if h.startswith("x")}
    if unknown:
        raise SchemaError(f"unexpected columns {sorted(unknown)}")
    return header, reader


def load_csv(stream, schema: Sequence[str] | None = None, with_hidden: bool = False):
    """Read a stacked sample from CSV.

    Parameters
    ----------
    stream : path, text stream or byte stream
    schema : sequence of str, optional
        Required header columns in addition to ``r`` and ``y``.
    with_hidden : bool
        Return a :class:`SyntheticSample` built from a ``y_hidden`` column.

    Raises
    ------
    SchemaError
        On malformed rows, outcome/indicator mismatches or an empty population.
    """
    if isinstance(stream, (str, bytes)) and not hasattr(stream, "read"):
        with open(stream, "r", newline="", encoding="utf-8") as fh:
            return load_csv(fh, schema, with_hidden)
    if isinstance(stream, io.BufferedIOBase) or (hasattr(stream, "mode") and "b" in getattr(stream, "mode", "")):
        stream = io.TextIOWrapper(stream, encoding="utf-8", newline="")
    header, reader = _read_rows(stream)
    for col in schema or ():
        if col not in header:
            raise SchemaError(f"header must contain column {col!r}")
    xcols = _x_columns(header)
    pos = {h: i for i, h in enumerate(header)}
    if with_hidden and "y_hidden" not in pos:
        raise SchemaError("y_hidden column requested but absent")
    xs, rs, ys, hidden = [], [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise SchemaError(f"row {lineno}: expected {len(header)} fields, got {len(row)}")
        rcell = row[pos["r"]].strip()
        if rcell not in ("0", "1"):
            raise SchemaError(f"row {lineno}: r must be 0 or 1, got {rcell!r}")
        r = rcell == "1"
        ycell = row[pos["y"]].strip()
        if r and ycell == "":
            raise SchemaError(f"row {lineno}: source unit (r=1) has no outcome")
        if not r and ycell != "":
            raise SchemaError(f"row {lineno}: target unit (r=0) carries outcome {ycell!r}")
        ys.append(_parse_float(ycell, lineno, "y") if r else math.nan)
        rs.append(r)
        xs.append([_parse_float(row[pos[c]].strip(), lineno, c) for c in xcols])
        if with_hidden and not r:
            hidden.append(_parse_float(row[pos["y_hidden"]].strip(), lineno, "y_hidden"))
    if not rs:
        raise SchemaError("no data rows")
    try:
        sample = StackedSample(np.array(xs), np.array(rs), np.array(ys))
    except ValueError as exc:
        raise SchemaError(str(exc)) from None
    if with_hidden:
        return SyntheticSample(sample, np.array(hidden))
    return sample


def write_csv(data, stream, include_hidden: bool = False) -> None:
    """Write a :class:`StackedSample` (or :class:`SyntheticSample`) as CSV.

    Floats use ``repr`` so that reading the file back is exact.  The hidden
    target outcomes are written only when ``include_hidden`` is set.
    """
    synthetic = data if isinstance(data, SyntheticSample) else None
    sample = synthetic.sample if synthetic is not None else data
    if include_hidden and synthetic is None:
        raise ValueError("include_hidden needs a SyntheticSample")
    writer = csv.writer(stream, lineterminator="\n")
    header = ["r", "y"] + [f"x{k}" for k in range(1, sample.d + 1)]
    if include_hidden:
        header.append("y_hidden")
    writer.writerow(header)
    hidden_iter = iter(synthetic.hidden_target_y) if include_hidden else None
    for i in range(sample.n):
        r = bool(sample.r[i])
        row = ["1" if r else "0", repr(float(sample.y[i])) if r else ""]
        row += [repr(float(v)) for v in sample.x[i]]
        if include_hidden:
            row.append("" if r else repr(float(next(hidden_iter))))
        writer.writerow(row)


# ---------------------------------------------------------------- synthetic design

PAPER_X_LOADINGS = np.array([-0.5, 0.5, 1.0])


def mix_seed(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for ``(seed, *stream)`` via ``numpy.random.SeedSequence``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), *map(int, stream)]))


def generate_paper_design(n: int, seed: int, p_source: float = 0.5) -> SyntheticSample:
    """Draw the simulation design.

    ``R ~ Bernoulli(p_source)``, ``Y | R=1 ~ N(0, 1)``, ``Y | R=0 ~ N(1, 1)`` and
    ``X | Y ~ N((-0.5, 0.5, 1) Y, I_3)``.  Draws with an empty population are
    redrawn from ``seed + 1``, ``seed + 2``, ...
    """
    if int(n) != n or n < 10:
        raise ValueError(f"n must be an integer >= 10, got {n!r}")
    if not 0 < p_source < 1:
        raise ValueError("p_source must lie in (0, 1)")
    n = int(n)
    s = int(seed)
    while True:
        rng = np.random.default_rng(np.random.SeedSequence(s & (2**64 - 1)))
        r = rng.random(n) < p_source
        if 0 < r.sum() < n:
            break
        s += 1
    y = np.where(r, rng.standard_normal(n), 1.0 + rng.standard_normal(n))
    x = y[:, None] * PAPER_X_LOADINGS + rng.standard_normal((n, 3))
    sample = StackedSample.from_source(x, r, y[r])
    # Q outcomes are N(1, 1): quantile levels beyond the median follow from ndtri
    truth = {"theta_mean": 1.0, "theta_quantiles": {0.5: 1.0}, "target_normal": (1.0, 1.0)}
    return SyntheticSample(sample, y[~r], truth)


def true_density_ratio(y):
    """``q_Y(y) / p_Y(y) = exp(-0.5 + y)`` for the simulation design."""
    out = np.exp(-0.5 + np.asarray(y, dtype=float))
    return float(out) if out.ndim == 0 else out


def true_conditional_model():
    """``Y | x ~ N(-0.2 x1 + 0.2 x2 + 0.4 x3, 0.4)`` under the source population."""
    from .models import GaussianLinear

    return GaussianLinear(np.array([0.0, -0.2, 0.2, 0.4]), 0.4, name="true")


# ---------------------------------------------------------------- Example 1

_EX1_LO, _EX1_HI = Fraction(1, 32), Fraction(25, 336)
_EX1_PR_X0 = (Fraction(1, 5), Fraction(1, 8), Fraction(2, 3))


def example1_q_y(t) -> tuple[Fraction, Fraction, Fraction]:
    """Target outcome distribution ``(q_Y(0), q_Y(1), q_Y(2))`` at parameter ``t``.

    Computed in exact rational arithmetic on the binary value of ``t``.
    """
    t = Fraction(t)
    if not _EX1_LO < t < _EX1_HI:
        raise ValueError(f"t must lie in (1/32, 25/336), got {float(t)!r}")
    return (5 * (25 - 416 * t) / 336, (32 * t - 1) / 6, (89 + 96 * t) / 112)


def example1_target_marginal(t, exact: bool = False):
    """``pr(X = 0)`` in the target population; equal to 7/12 for every valid t."""
    q = example1_q_y(t)
    value = sum(p * qy for p, qy in zip(_EX1_PR_X0, q))
    return value if exact else float(value)
