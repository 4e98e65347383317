"""Block pooling of high-resolution fields into low-resolution model inputs.

Non-overlapping windows of side M; average pooling takes the block mean,
max pooling the block maximum.  Pooled samples live at the centroid of their
block's high-resolution coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import Field, Field1D, Grid1D, Grid2D

POOL_MODES = ("avg", "max")


class PoolingError(ValueError):
    """Window incompatible with the field resolution."""


def canonical_mode(mode: str) -> str:
    token = {"avg": "avg", "average": "avg", "max": "max"}.get(mode.lower())
    if token is None:
        raise PoolingError(f"unknown pooling mode {mode!r} (expected avg or max)")
    return token


@dataclass(frozen=True)
class PoolingSpec:
    mode: str
    window: int

    def __post_init__(self):
        object.__setattr__(self, "mode", canonical_mode(self.mode))
        if self.window < 1:
            raise PoolingError(f"window must be >= 1, got {self.window}")


@dataclass(frozen=True)
class PooledSample:
    """Low-resolution values plus the coordinates they are attributed to.

    ``coords`` is the centroid array for 1D fields and an (x_centers,
    y_centers) pair for 2D fields.
    """

    values: np.ndarray
    coords: np.ndarray | tuple[np.ndarray, np.ndarray]
    spec: PoolingSpec
    source_id: int | None = None

    def __post_init__(self):
        v = self.values
        if v.ndim == 1:
            if self.coords.shape != v.shape:
                raise PoolingError("coords length does not match pooled values")
        elif v.ndim == 2:
            xc, yc = self.coords
            if xc.shape != (v.shape[1],) or yc.shape != (v.shape[0],):
                raise PoolingError("coords do not match pooled value shape")
        else:
            raise PoolingError(f"unsupported pooled rank {v.ndim}")


def _check_window(size: int, m: int, axis: str):
    if m < 1 or size % m:
        raise PoolingError(f"window {m} does not divide the {axis} resolution {size}")


def _blocks_1d(values: np.ndarray, m: int) -> np.ndarray:
    return values.reshape(values.shape[0] // m, m)


def _blocks_2d(values: np.ndarray, m: int) -> np.ndarray:
    # one contiguous row per block, block-row-major within a block
    ny, nx = values.shape
    return (
        values.reshape(ny // m, m, nx // m, m)
        .transpose(0, 2, 1, 3)
        .reshape(ny // m, nx // m, m * m)
    )


def pooled_coords(grid: Grid1D | Grid2D, m: int):
    """Centroids of the M-blocks of the grid coordinates."""
    if isinstance(grid, Grid1D):
        _check_window(grid.n_points, m, "x")
        return _blocks_1d(grid.coords(), m).mean(axis=1)
    _check_window(grid.nx, m, "x")
    _check_window(grid.ny, m, "y")
    return (
        _blocks_1d(grid.x_coords(), m).mean(axis=1),
        _blocks_1d(grid.y_coords(), m).mean(axis=1),
    )


def _pool(field: Field, m: int, mode: str, source_id: int | None) -> PooledSample:
    spec = PoolingSpec(mode, m)
    if isinstance(field, Field1D):
        _check_window(field.grid.n_points, m, "x")
        blocks = _blocks_1d(field.values, m)
        values = blocks.mean(axis=1) if mode == "avg" else blocks.max(axis=1)
    else:
        _check_window(field.grid.nx, m, "x")
        _check_window(field.grid.ny, m, "y")
        blocks = _blocks_2d(field.values, m)
        values = blocks.mean(axis=2) if mode == "avg" else blocks.max(axis=2)
    return PooledSample(values, pooled_coords(field.grid, m), spec, source_id)


def pool_avg(field: Field, m: int, source_id: int | None = None) -> PooledSample:
    """Mean over each non-overlapping M-block."""
    return _pool(field, m, "avg", source_id)


def pool_max(field: Field, m: int, source_id: int | None = None) -> PooledSample:
    """Maximum over each non-overlapping M-block."""
    return _pool(field, m, "max", source_id)


def pool(field: Field, spec: PoolingSpec, source_id: int | None = None) -> PooledSample:
    return _pool(field, spec.window, spec.mode, source_id)
