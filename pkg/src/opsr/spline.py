"""Cubic-spline interpolation baselines: 1D splines and separable bicubic.

Fits use not-a-knot end conditions (reproduces cubic polynomials exactly).
Evaluation outside the knot hull extends the end-interval cubic, so every
high-resolution point receives a prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .fields import Field1D, Field2D, Grid1D, Grid2D
from .pooling import PooledSample


class SplineError(ValueError):
    """Bad knot data: too few points, unsorted, or duplicated."""


@dataclass(frozen=True)
class Spline1D:
    """Piecewise cubic: ``coefficients[d, i]`` multiplies (x - knots[i])^(3-d)."""

    knots: np.ndarray
    coefficients: np.ndarray

    def __post_init__(self):
        if self.knots.ndim != 1 or self.knots.size < 4:
            raise SplineError(f"need at least 4 knots, got {self.knots.size}")
        if self.coefficients.shape != (4, self.knots.size - 1):
            raise SplineError("coefficient block does not match the knot count")


def fit_cubic_spline_1d(xs: np.ndarray, ys: np.ndarray) -> Spline1D:
    """Not-a-knot cubic spline through (xs, ys); xs strictly increasing."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.ndim != 1 or xs.shape != ys.shape:
        raise SplineError("xs and ys must be equal-length 1D arrays")
    if xs.size < 4:
        raise SplineError(f"need at least 4 knots, got {xs.size}")
    if np.any(np.diff(xs) <= 0):
        raise SplineError("knots must be strictly increasing")
    fit = CubicSpline(xs, ys, bc_type="not-a-knot")
    return Spline1D(fit.x.copy(), fit.c.copy())


def eval_spline_1d(spline: Spline1D, x) -> np.ndarray | float:
    """Evaluate the piecewise cubic; outside the hull the end cubic extends."""
    x_arr = np.asarray(x, dtype=np.float64)
    idx = np.clip(
        np.searchsorted(spline.knots, x_arr, side="right") - 1,
        0,
        spline.knots.size - 2,
    )
    t = x_arr - spline.knots[idx]
    c = spline.coefficients
    out = ((c[0, idx] * t + c[1, idx]) * t + c[2, idx]) * t + c[3, idx]
    return float(out) if np.isscalar(x) else out


def _linear_with_extrapolation(xs: np.ndarray, ys: np.ndarray, targets: np.ndarray) -> np.ndarray:
    out = np.interp(targets, xs, ys)
    lo = targets < xs[0]
    hi = targets > xs[-1]
    if lo.any():
        slope = (ys[1] - ys[0]) / (xs[1] - xs[0])
        out[lo] = ys[0] + slope * (targets[lo] - xs[0])
    if hi.any():
        slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
        out[hi] = ys[-1] + slope * (targets[hi] - xs[-1])
    return out


def _interp_rows(knots: np.ndarray, rows: np.ndarray, targets: np.ndarray, cubic: bool) -> np.ndarray:
    """Interpolate each row of ``rows`` (sampled at ``knots``) onto ``targets``."""
    if cubic:
        fit = CubicSpline(knots, rows, axis=1, bc_type="not-a-knot", extrapolate=True)
        return fit(targets)
    return np.vstack([_linear_with_extrapolation(knots, row, targets) for row in rows])


def spline_reconstruct_1d(sample: PooledSample, hr_grid: Grid1D) -> Field1D:
    """Cubic-spline reconstruction of a pooled 1D field on its HR grid."""
    spline = fit_cubic_spline_1d(sample.coords, sample.values)
    return Field1D(hr_grid, eval_spline_1d(spline, hr_grid.coords()))


def bicubic_uses_fallback(sample: PooledSample) -> bool:
    """True when the pooled grid is too small for cubic fits in some axis."""
    ny_p, nx_p = sample.values.shape
    return nx_p < 4 or ny_p < 4


def bicubic_reconstruct_2d(sample: PooledSample, hr_grid: Grid2D) -> Field2D:
    """Separable cubic-spline reconstruction of a pooled 2D field.

    Splines run along x for each pooled row, then along y for each HR column.
    Pooled grids narrower than 4 points in either axis fall back to separable
    linear interpolation (see :func:`bicubic_uses_fallback`).
    """
    xc, yc = sample.coords
    cubic = not bicubic_uses_fallback(sample)
    rows_on_hr_x = _interp_rows(xc, sample.values, hr_grid.x_coords(), cubic)
    cols_on_hr_y = _interp_rows(yc, rows_on_hr_x.T, hr_grid.y_coords(), cubic)
    return Field2D(hr_grid, cols_on_hr_y.T)
