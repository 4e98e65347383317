"""Uniform grids, scalar fields on them, and the relative L2 metric.

All field data is float64; grid conventions:

* periodic 1D grids exclude the right endpoint (spacing ``span / n``),
* non-periodic 1D grids include both endpoints (spacing ``span / (n - 1)``),
* 2D grids live on [0, pi] x [0, pi], periodic in x, endpoint-inclusive in y.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GridError(ValueError):
    """Invalid grid construction or mismatched grids."""


class FieldError(ValueError):
    """Field data inconsistent with its grid, or non-finite."""


@dataclass(frozen=True)
class Grid1D:
    n_points: int
    x_min: float
    x_max: float
    periodic: bool

    def __post_init__(self):
        if self.n_points < 2:
            raise GridError(f"need at least 2 points, got {self.n_points}")
        if not self.x_max > self.x_min:
            raise GridError(f"empty span [{self.x_min}, {self.x_max}]")

    @property
    def spacing(self) -> float:
        span = self.x_max - self.x_min
        return span / self.n_points if self.periodic else span / (self.n_points - 1)

    def coords(self) -> np.ndarray:
        return self.x_min + self.spacing * np.arange(self.n_points)


@dataclass(frozen=True)
class Grid2D:
    """[0, pi] x [0, pi]: x periodic (right endpoint excluded), y Dirichlet."""

    nx: int
    ny: int
    x_min: float = 0.0
    x_max: float = field(default=np.pi, repr=False)
    y_min: float = 0.0
    y_max: float = field(default=np.pi, repr=False)

    def __post_init__(self):
        if self.nx < 4:
            raise GridError(f"nx must be >= 4, got {self.nx}")
        if self.ny < 3:
            raise GridError(f"ny must be >= 3, got {self.ny}")

    @property
    def hx(self) -> float:
        return (self.x_max - self.x_min) / self.nx

    @property
    def hy(self) -> float:
        return (self.y_max - self.y_min) / (self.ny - 1)

    def x_coords(self) -> np.ndarray:
        return self.x_min + self.hx * np.arange(self.nx)

    def y_coords(self) -> np.ndarray:
        return self.y_min + self.hy * np.arange(self.ny)


def make_grid_1d(n_points: int, x_min: float, x_max: float, periodic: bool) -> Grid1D:
    return Grid1D(n_points, float(x_min), float(x_max), periodic)


def _as_f64(values, shape, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != shape:
        raise FieldError(f"{what}: expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise FieldError(f"{what}: non-finite values")
    return arr


@dataclass(frozen=True)
class Field1D:
    grid: Grid1D
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "values", _as_f64(self.values, (self.grid.n_points,), "Field1D")
        )


@dataclass(frozen=True)
class Field2D:
    """Scalar samples stored row-major: ``values[j, i]`` at (x_i, y_j)."""

    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "values", _as_f64(self.values, (self.grid.ny, self.grid.nx), "Field2D")
        )


Field = Field1D | Field2D


def l2_norm(values: np.ndarray) -> float:
    """Euclidean norm of a flat or multi-dimensional array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise FieldError("l2_norm of empty array")
    return float(np.sqrt(np.sum(arr * arr)))


def relative_l2_error(reference: Field, prediction: Field) -> float:
    """|| reference - prediction ||_2 / || reference ||_2 on a shared grid."""
    if reference.grid != prediction.grid:
        raise GridError(
            f"grid mismatch: {reference.grid!r} vs {prediction.grid!r}"
        )
    ref_norm = l2_norm(reference.values)
    if ref_norm == 0.0:
        raise FieldError("relative_l2_error undefined for zero reference")
    return l2_norm(reference.values - prediction.values) / ref_norm
