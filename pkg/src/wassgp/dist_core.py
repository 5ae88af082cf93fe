"""
One-dimensional distributions on a common quantile grid.

Every distribution is reduced to its quantile function sampled at the
midpoints ``(k + 1/2) / m`` of ``(0, 1)``.  On that grid the quadratic
Wasserstein distance is an exact (scaled) Euclidean distance between value
arrays, which is what makes the kernels in :mod:`wassgp.kernels` valid at the
discrete level.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.spatial.distance import cdist

from .errors import InvalidInputError

DEFAULT_GRID_SIZE = 512
CDF_TIE_TOL = 1e-12


def midpoint_levels(m: int) -> np.ndarray:
    """Probability levels ``(k + 1/2) / m`` for ``k = 0..m-1``."""
    if m < 1:
        raise InvalidInputError(f"grid size must be positive, got {m}")
    return (np.arange(m) + 0.5) / m


@dataclass(frozen=True, eq=False)
class QuantileFunction:
    """Discretized inverse CDF, ``values[k] ~ F^{-1}((k + 1/2) / m)``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float, copy=True).ravel()
        if v.size == 0:
            raise InvalidInputError("quantile function needs at least one value")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("quantile values must be finite")
        if np.any(np.diff(v) < 0):
            raise InvalidInputError("quantile values must be non-decreasing")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def grid_size(self) -> int:
        return self.values.size

    def __len__(self):
        return self.values.size

    def same_as(self, other: "QuantileFunction") -> bool:
        return np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class EmpiricalDistribution:
    samples: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        x = np.array(self.samples, dtype=float, copy=True).ravel()
        if x.size == 0:
            raise InvalidInputError("empirical distribution needs at least one sample")
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("samples must be finite")
        if self.weights is None:
            w = np.full(x.size, 1.0 / x.size)
        else:
            w = np.array(self.weights, dtype=float, copy=True).ravel()
            if w.shape != x.shape:
                raise InvalidInputError("weights and samples differ in length")
            if np.any(~np.isfinite(w)) or np.any(w <= 0):
                raise InvalidInputError("weights must be positive")
            if abs(w.sum() - 1.0) > 1e-12:
                raise InvalidInputError(f"weights sum to {w.sum()!r}, not 1")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.samples.size


@dataclass(frozen=True, eq=False)
class GridDensity:
    """Density values at ``d`` equispaced abscissae on ``[support_lo, support_hi]``.

    The constructor validates; use :meth:`normalized` to build from an
    unnormalized non-negative function.
    """

    support_lo: float
    support_hi: float
    density: np.ndarray
    _x: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        lo, hi = float(self.support_lo), float(self.support_hi)
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise InvalidInputError(f"invalid support [{lo}, {hi}]")
        f = np.array(self.density, dtype=float, copy=True).ravel()
        if f.size < 2:
            raise InvalidInputError("density grid needs at least two points")
        if not np.all(np.isfinite(f)) or np.any(f < 0):
            raise InvalidInputError("density values must be finite and non-negative")
        x = np.linspace(lo, hi, f.size)
        total = trapezoid(f, x)
        if abs(total - 1.0) > 1e-8:
            raise InvalidInputError(f"density integrates to {total!r}, not 1")
        f.flags.writeable = False
        x.flags.writeable = False
        object.__setattr__(self, "support_lo", lo)
        object.__setattr__(self, "support_hi", hi)
        object.__setattr__(self, "density", f)
        object.__setattr__(self, "_x", x)

    @classmethod
    def normalized(cls, lo: float, hi: float, values) -> "GridDensity":
        f = np.asarray(values, dtype=float)
        if not np.all(np.isfinite(f)) or np.any(f < 0):
            raise InvalidInputError("density values must be finite and non-negative")
        x = np.linspace(lo, hi, f.size)
        total = trapezoid(f, x)
        if not total > 0:
            raise InvalidInputError("density has zero mass on its grid")
        return cls(lo, hi, f / total)

    @property
    def x(self) -> np.ndarray:
        return self._x

    @property
    def size(self) -> int:
        return self.density.size

    def cdf_nodes(self) -> np.ndarray:
        """Trapezoid-accumulated CDF at the grid abscissae (last value 1)."""
        c = cumulative_trapezoid(self.density, self._x, initial=0.0)
        return c / c[-1]


@dataclass(frozen=True)
class Moments:
    m1: float
    m2: float

    @property
    def variance(self) -> float:
        return self.m2 - self.m1 * self.m1


def quantile_from_samples(e: EmpiricalDistribution | Sequence[float],
                          m: int = DEFAULT_GRID_SIZE) -> QuantileFunction:
    """Generalized inverse ``inf{u : F(u) >= t}`` of the weighted empirical CDF.

    No interpolation is applied: point masses stay point masses.
    """
    if not isinstance(e, EmpiricalDistribution):
        e = EmpiricalDistribution(np.asarray(e, dtype=float))
    order = np.argsort(e.samples, kind="stable")
    xs = e.samples[order]
    cw = np.cumsum(e.weights[order])
    cw[-1] = 1.0
    t = midpoint_levels(m)
    # same slack as the weight-sum check, so exact ties survive cumsum rounding
    idx = np.searchsorted(cw, t - CDF_TIE_TOL, side="left")
    return QuantileFunction(xs[np.minimum(idx, xs.size - 1)])


def density_inverse_cdf(g: GridDensity, t) -> np.ndarray:
    """Piecewise-linear inverse of the trapezoid CDF of ``g`` at levels ``t``."""
    if not isinstance(g, GridDensity):
        raise InvalidInputError("expected a GridDensity")
    cdf = g.cdf_nodes()
    x = g.x
    t = np.asarray(t, dtype=float)
    # first node with cdf >= t; t in (0, 1) so 1 <= hi <= d-1
    hi = np.clip(np.searchsorted(cdf, t, side="left"), 1, x.size - 1)
    lo = hi - 1
    span = cdf[hi] - cdf[lo]
    frac = np.where(span > 0, (t - cdf[lo]) / np.where(span > 0, span, 1.0), 1.0)
    q = x[lo] + np.clip(frac, 0.0, 1.0) * (x[hi] - x[lo])
    return np.clip(q, g.support_lo, g.support_hi)


def quantile_from_density(g: GridDensity, m: int = DEFAULT_GRID_SIZE) -> QuantileFunction:
    """Invert the piecewise-linear trapezoid CDF of ``g`` at the midpoint levels."""
    q = density_inverse_cdf(g, midpoint_levels(m))
    return QuantileFunction(np.maximum.accumulate(q))


def _check_grids(a: QuantileFunction, b: QuantileFunction):
    if a.grid_size != b.grid_size:
        raise InvalidInputError(
            f"quantile grid sizes differ: {a.grid_size} vs {b.grid_size}")


def w2_distance(a: QuantileFunction, b: QuantileFunction) -> float:
    """Quadratic Wasserstein distance between two quantile-grid distributions."""
    _check_grids(a, b)
    d = a.values - b.values
    # rescale so tiny nonzero gaps do not underflow to a zero distance
    s = float(np.max(np.abs(d)))
    if s == 0.0:
        return 0.0
    d = d / s
    return s * math.sqrt(float(np.mean(d * d)))


def w2_oracle_discrete(xs, ys) -> float:
    """Exact W2 between uniform empirical measures by brute-force assignment.

    Test oracle only; refuses more than 8 atoms.
    """
    xs = np.asarray(xs, dtype=float).ravel()
    ys = np.asarray(ys, dtype=float).ravel()
    if xs.size != ys.size:
        raise InvalidInputError("oracle needs equally many atoms on both sides")
    if xs.size > 8:
        raise InvalidInputError("oracle refuses more than 8 atoms")
    if xs.size == 0:
        raise InvalidInputError("oracle needs at least one atom")
    best = math.inf
    for perm in itertools.permutations(range(ys.size)):
        cost = float(np.sum((xs - ys[list(perm)]) ** 2))
        best = min(best, cost)
    return math.sqrt(best / xs.size)


def moments_of(q: QuantileFunction) -> Moments:
    v = q.values
    return Moments(float(np.mean(v)), float(np.mean(v * v)))


def shift(q: QuantileFunction, c: float) -> QuantileFunction:
    """Push-forward by the translation ``x -> x + c``."""
    return QuantileFunction(q.values + c)


def stack_quantiles(qs: Sequence[QuantileFunction]) -> np.ndarray:
    if len(qs) == 0:
        raise InvalidInputError("need at least one distribution")
    m = qs[0].grid_size
    for q in qs:
        if q.grid_size != m:
            raise InvalidInputError(
                f"quantile grid sizes differ: {m} vs {q.grid_size}")
    return np.vstack([q.values for q in qs])


def pairwise_w2(a: Sequence[QuantileFunction], b: Sequence[QuantileFunction] | None = None):
    """Cross W2 matrix and exact-equality mask between two input lists.

    Returns ``(dist, same)`` where ``same[i, j]`` is True iff the two value
    arrays are identical.
    """
    A = stack_quantiles(a)
    B = A if b is None else stack_quantiles(b)
    if A.shape[1] != B.shape[1]:
        raise InvalidInputError(
            f"quantile grid sizes differ: {A.shape[1]} vs {B.shape[1]}")
    sq = cdist(A, B, "sqeuclidean") / A.shape[1]
    if b is None:
        sq = 0.5 * (sq + sq.T)
        np.fill_diagonal(sq, 0.0)
    dist = np.sqrt(sq)
    same = np.zeros(dist.shape, dtype=bool)
    for i, j in zip(*np.nonzero(sq == 0.0)):
        same[i, j] = np.array_equal(A[i], B[j])
    return dist, same
