"""Within-cycle curve smoothing and cycle-level geometric features.

A daily hormone series is smoothed with cubic B-splines on knots at
every observed day (extended three spacings past each end) penalized by
fourth-order coefficient differences, with the penalty weight chosen by
generalized cross-validation unless overridden.  The fourth-order
difference penalty has the cubic polynomials in its null space, so a
noiseless polynomial input of degree <= 3 is reproduced exactly at any
penalty weight.

Three features summarize a smoothed profile h: the peak value h(t_hat),
the curvature at the peak k(t_hat) with
k(t) = |h''(t)| (1 + h'(t)^2)^(-3/2), and the average curvature over the
fertile window, sum of k at the seven integer offsets t_hat-5 .. t_hat+1
divided by 6 (the divisor follows the source convention even though the
window holds seven points).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline
from scipy.linalg import solveh_banded

from .model import ModelError

SPLINE_DEGREE = 3
MIN_OBSERVATIONS = 7
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class FeatureKind(enum.Enum):
    PEAK_VALUE = "peak"
    CURVATURE_AT_PEAK = "curv-peak"
    AVG_CURVATURE_FERTILE_WINDOW = "avg-curv"

    @classmethod
    def from_name(cls, name: str) -> "FeatureKind":
        for kind in cls:
            if kind.value == name or kind.name.lower() == name.lower():
                return kind
        raise ModelError(f"unknown feature kind {name!r}")


@dataclass(frozen=True)
class DailySeries:
    """Hormone measurements on strictly increasing days within one cycle."""

    day: np.ndarray
    value: np.ndarray

    def __post_init__(self):
        day = np.asarray(self.day, dtype=float)
        value = np.asarray(self.value, dtype=float)
        if day.ndim != 1 or day.shape != value.shape:
            raise ModelError("day and value must be 1-D arrays of equal length")
        if len(day) < MIN_OBSERVATIONS:
            raise ModelError(
                f"need at least {MIN_OBSERVATIONS} observations, got {len(day)}"
            )
        if not np.all(np.diff(day) > 0):
            raise ModelError("days must be strictly increasing")
        if not np.all(np.isfinite(value)):
            raise ModelError("hormone values must be finite")
        object.__setattr__(self, "day", day)
        object.__setattr__(self, "value", value)


@dataclass(frozen=True)
class SmoothingConfig:
    penalty_order: int = 4
    penalty_weight: float | None = None  # None selects by GCV
    gcv_grid: np.ndarray = field(
        default_factory=lambda: np.logspace(-6.0, 6.0, 25)
    )


@dataclass(frozen=True)
class SmoothedProfile:
    """Cubic spline with analytic first and second derivatives on [L, M]."""

    knots: np.ndarray
    coefficients: np.ndarray
    degree: int
    domain: tuple[float, float]
    penalty_weight: float
    rss: float

    def _spline(self, deriv: int = 0) -> BSpline:
        sp = BSpline(self.knots, self.coefficients, self.degree, extrapolate=False)
        return sp if deriv == 0 else sp.derivative(deriv)

    def __call__(self, t):
        return self._spline(0)(t)

    def deriv1(self, t):
        return self._spline(1)(t)

    def deriv2(self, t):
        return self._spline(2)(t)


def _knot_vector(day: np.ndarray) -> np.ndarray:
    """Knots at every observed day, extended DEGREE spacings past each end."""
    h_lo = day[1] - day[0]
    h_hi = day[-1] - day[-2]
    left = day[0] - h_lo * np.arange(SPLINE_DEGREE, 0, -1)
    right = day[-1] + h_hi * np.arange(1, SPLINE_DEGREE + 1)
    return np.concatenate([left, day, right])


def _banded_upper(M: np.ndarray, bw: int) -> np.ndarray:
    """Pack a symmetric banded matrix into solveh_banded's upper form."""
    m = M.shape[0]
    ab = np.zeros((bw + 1, m))
    for d in range(bw + 1):
        ab[bw - d, d:] = np.diagonal(M, offset=d)
    return ab


def smooth_profile(series: DailySeries, config: SmoothingConfig | None = None) -> SmoothedProfile:
    """Penalized least-squares spline through one cycle's measurements."""
    config = config or SmoothingConfig()
    day, y = series.day, series.value
    n = len(day)
    knots = _knot_vector(day)
    B = BSpline.design_matrix(day, knots, SPLINE_DEGREE).toarray()
    m = B.shape[1]
    d = config.penalty_order
    if not 1 <= d <= m - 1:
        raise ModelError(f"penalty order {d} invalid for basis of size {m}")
    D = np.diff(np.eye(m), d, axis=0)
    BtB = B.T @ B
    DtD = D.T @ D
    # Scale-free penalty weight: weights are relative to the trace ratio.
    ref = np.trace(BtB) / np.trace(DtD)
    Bty = B.T @ y
    bw = max(SPLINE_DEGREE, d)

    def solve_for(lam: float):
        ab = _banded_upper(BtB + lam * DtD, bw)
        coef = solveh_banded(ab, Bty)
        fitted = B @ coef
        rss = float(np.sum((y - fitted) ** 2))
        return coef, rss, ab

    if config.penalty_weight is not None:
        lam = float(config.penalty_weight) * ref
        coef, rss, _ = solve_for(lam)
    else:
        # The basis is slightly larger than the data (knots at every day),
        # so lambda -> 0 reaches exact interpolation where GCV is 0/0;
        # restrict the search to fits that leave some residual df.
        best = fallback = None
        for rel in np.asarray(config.gcv_grid, dtype=float):
            lam = rel * ref
            coef, rss, ab = solve_for(lam)
            edf = float(np.einsum("ij,ji->", B, solveh_banded(ab, B.T)))
            if fallback is None or edf < fallback[0]:
                fallback = (edf, lam, coef, rss)
            if edf > n - 1.5:
                continue
            gcv = n * rss / (n - edf) ** 2
            if best is None or gcv < best[0]:
                best = (gcv, lam, coef, rss)
        _, lam, coef, rss = best if best is not None else fallback
    if not np.isfinite(rss):
        raise ModelError("smoothing produced a non-finite residual sum of squares")
    return SmoothedProfile(
        knots=knots,
        coefficients=coef,
        degree=SPLINE_DEGREE,
        domain=(float(day[0]), float(day[-1])),
        penalty_weight=lam / ref,
        rss=rss,
    )


def find_peak(profile: SmoothedProfile, grid_step: float = 0.01) -> tuple[float, float]:
    """Argmax of the smoothed curve over its domain; ties break to smaller t."""
    lo, hi = profile.domain
    grid = np.arange(lo, hi, grid_step)
    grid = np.append(grid, hi)
    vals = profile(grid)
    i = int(np.argmax(vals))  # first maximum: deterministic tie-break
    a = grid[max(i - 1, 0)]
    b = grid[min(i + 1, len(grid) - 1)]
    t_hat = _golden_max(profile, a, b)
    return t_hat, float(profile(t_hat))


def _golden_max(f, a: float, b: float, tol: float = 1e-10) -> float:
    """Golden-section maximization on [a, b]."""
    x1 = b - GOLDEN * (b - a)
    x2 = a + GOLDEN * (b - a)
    f1, f2 = f(x1), f(x2)
    while b - a > tol:
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + GOLDEN * (b - a)
            f2 = f(x2)
        else:
            b, x2, f2 = x2, x1, f1
            x1 = b - GOLDEN * (b - a)
            f1 = f(x1)
    return 0.5 * (a + b)


def curvature_at(profile: SmoothedProfile, t: float) -> float:
    """Plane-curve curvature |h''| (1 + h'^2)^(-3/2) of the smoothed profile."""
    lo, hi = profile.domain
    if not lo <= t <= hi:
        raise ModelError(f"t={t} outside the profile domain [{lo}, {hi}]")
    d1 = float(profile.deriv1(t))
    d2 = float(profile.deriv2(t))
    return abs(d2) * (1.0 + d1 * d1) ** -1.5


def extract_feature(profile: SmoothedProfile, kind: FeatureKind) -> float:
    """Cycle-level scalar summary of a smoothed profile."""
    t_hat, peak = find_peak(profile)
    if kind is FeatureKind.PEAK_VALUE:
        return peak
    if kind is FeatureKind.CURVATURE_AT_PEAK:
        return curvature_at(profile, t_hat)
    lo, hi = profile.domain
    offsets = t_hat + np.arange(-5.0, 2.0)
    points = [t for t in offsets if lo <= t <= hi]
    if not points:
        raise ModelError("fertile window clipped to the domain is empty")
    return sum(curvature_at(profile, t) for t in points) / 6.0
