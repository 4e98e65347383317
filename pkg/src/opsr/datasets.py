"""Snapshot datasets: seeded generation, train/test splits, and OSRD files.

Each snapshot is solved from a seed derived as ``derive_seed(master_seed, 1,
index)``, so generation is order-independent and reproducible; the 90/10
train/test split (test rounded down) is a permutation drawn from
``derive_seed(master_seed, 2)``.  Pooled inputs are never persisted; they are
re-derived from the stored high-resolution fields.
"""

from __future__ import annotations

import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .fields import Field, Field1D, Field2D, Grid1D, Grid2D
from .pooling import PooledSample, PoolingSpec, pool
from .rng import derive_seed, make_rng
from .simulate import (
    KDVB_DOMAIN,
    MIN_POISSON_NX,
    KdvbParams,
    KdvbSolverConfig,
    SolverError,
    sample_kdvb_params,
    sample_poisson_source,
    solve_kdvb,
    solve_poisson,
)

DATASET_MAGIC = b"OSRD"
DATASET_VERSION = 1
CASES = ("kdvb", "poisson")
_CASE_TAGS = {"kdvb": 1, "poisson": 2}
_TAG_CASES = {v: k for k, v in _CASE_TAGS.items()}

_SNAPSHOT_TAG = 1
_SPLIT_TAG = 2


class DatasetError(IOError):
    """Malformed OSRD data or inconsistent dataset construction."""


@dataclass(frozen=True)
class SRPair:
    """One training/test record: pooled input, HR target, query coordinates."""

    input: PooledSample
    target: Field
    query_coords: np.ndarray
    snapshot_id: int
    gen_params: KdvbParams | int


@dataclass
class Dataset:
    case: str
    grid: Grid1D | Grid2D
    fields: list[Field]
    params: list
    master_seed: int
    train_indices: list[int]
    test_indices: list[int]

    def __post_init__(self):
        if self.case not in CASES:
            raise DatasetError(f"unknown case {self.case!r}")
        if set(self.train_indices) & set(self.test_indices):
            raise DatasetError("train and test splits overlap")

    @property
    def n_snapshots(self) -> int:
        return len(self.fields)

    def hr_point_count(self) -> int:
        g = self.grid
        return g.n_points if isinstance(g, Grid1D) else g.nx * g.ny

    def make_pair(self, index: int, spec: PoolingSpec) -> SRPair:
        from .deeponet import grid_query_coords

        target = self.fields[index]
        return SRPair(
            input=pool(target, spec, source_id=index),
            target=target,
            query_coords=grid_query_coords(self.grid),
            snapshot_id=index,
            gen_params=self.params[index],
        )


def snapshot_seed(master_seed: int, index: int) -> int:
    return derive_seed(master_seed, _SNAPSHOT_TAG, index)


def split_indices(n_snapshots: int, master_seed: int) -> tuple[list[int], list[int]]:
    """90/10 split by snapshot (test count rounded down), seeded permutation."""
    n_test = n_snapshots // 10
    perm = make_rng(master_seed, _SPLIT_TAG).permutation(n_snapshots)
    test = sorted(int(i) for i in perm[:n_test])
    train = sorted(int(i) for i in perm[n_test:])
    return train, test


def _solve_kdvb_snapshot(args) -> tuple[np.ndarray, KdvbParams]:
    seed, config = args
    params = sample_kdvb_params(seed)
    return solve_kdvb(params, config).values, params


def _solve_poisson_snapshot(args) -> tuple[np.ndarray, int]:
    seed, grid = args
    instance = sample_poisson_source(seed, grid)
    return solve_poisson(instance, grid).values, seed


def _run_jobs(worker, arglist, jobs: int):
    if jobs <= 1:
        return [worker(a) for a in arglist]
    with ProcessPoolExecutor(max_workers=jobs) as pool_:
        return list(pool_.map(worker, arglist, chunksize=4))


def generate_dataset(
    case: str,
    n_snapshots: int,
    master_seed: int,
    solver_config: KdvbSolverConfig | None = None,
    grid: Grid2D | None = None,
    jobs: int = 1,
) -> Dataset:
    """Solve ``n_snapshots`` independent instances and split them 90/10."""
    if case not in CASES:
        raise DatasetError(f"unknown case {case!r}")
    if n_snapshots < 2:
        raise DatasetError("need at least 2 snapshots")
    seeds = [snapshot_seed(master_seed, i) for i in range(n_snapshots)]
    try:
        if case == "kdvb":
            config = solver_config or KdvbSolverConfig()
            results = _run_jobs(_solve_kdvb_snapshot, [(s, config) for s in seeds], jobs)
            out_grid = config.grid()
            fields = [Field1D(out_grid, v) for v, _ in results]
        else:
            out_grid = grid or Grid2D(128, 128)
            if out_grid.nx < MIN_POISSON_NX:
                raise DatasetError(
                    f"poisson generation needs nx >= {MIN_POISSON_NX} to resolve the "
                    f"wavenumber-16 boundary data, got {out_grid.nx}"
                )
            results = _run_jobs(_solve_poisson_snapshot, [(s, out_grid) for s in seeds], jobs)
            fields = [Field2D(out_grid, v) for v, _ in results]
    except SolverError as exc:
        raise SolverError(f"snapshot generation failed: {exc}") from exc
    params = [p for _, p in results]
    train, test = split_indices(n_snapshots, master_seed)
    return Dataset(case, out_grid, fields, params, master_seed, train, test)


# ---------------------------------------------------------------------------
# OSRD files

def write_dataset(dataset: Dataset, path) -> None:
    g = dataset.grid
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<BB", DATASET_VERSION, _CASE_TAGS[dataset.case]))
        if dataset.case == "kdvb":
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<I", g.n_points))
            fh.write(struct.pack("<2d", g.x_min, g.x_max))
        else:
            fh.write(struct.pack("<B", 2))
            fh.write(struct.pack("<2I", g.nx, g.ny))
            fh.write(struct.pack("<4d", g.x_min, g.x_max, g.y_min, g.y_max))
        fh.write(struct.pack("<Q", dataset.master_seed))
        fh.write(struct.pack("<I", dataset.n_snapshots))
        for field, params in zip(dataset.fields, dataset.params):
            if dataset.case == "kdvb":
                fh.write(struct.pack("<Q", params.seed))
                fh.write(struct.pack("<2d", params.visc_a, params.disp_b))
                fh.write(struct.pack("<i", params.soliton_n))
            else:
                fh.write(struct.pack("<Q", params))
            fh.write(field.values.astype("<f8", copy=False).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise DatasetError(f"truncated dataset file reading {what}")
    return data


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != DATASET_MAGIC:
            raise DatasetError(f"{path}: not an OSRD dataset (bad magic)")
        version, case_tag, ndim = struct.unpack("<BBB", _read_exact(fh, 3, "header"))
        if version != DATASET_VERSION:
            raise DatasetError(f"{path}: unsupported dataset version {version}")
        case = _TAG_CASES.get(case_tag)
        if case is None or ndim != (1 if case == "kdvb" else 2):
            raise DatasetError(f"{path}: inconsistent case/dimension header")
        if case == "kdvb":
            (n_points,) = struct.unpack("<I", _read_exact(fh, 4, "dims"))
            x_min, x_max = struct.unpack("<2d", _read_exact(fh, 16, "bounds"))
            if (x_min, x_max) != KDVB_DOMAIN:
                raise DatasetError(f"{path}: unexpected domain [{x_min}, {x_max}]")
            grid = Grid1D(n_points, x_min, x_max, periodic=True)
            point_count = n_points
        else:
            nx, ny = struct.unpack("<2I", _read_exact(fh, 8, "dims"))
            bounds = struct.unpack("<4d", _read_exact(fh, 32, "bounds"))
            grid = Grid2D(nx, ny)
            if bounds != (grid.x_min, grid.x_max, grid.y_min, grid.y_max):
                raise DatasetError(f"{path}: unexpected 2D domain bounds {bounds}")
            point_count = nx * ny
        (master_seed,) = struct.unpack("<Q", _read_exact(fh, 8, "master seed"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "snapshot count"))
        fields, params = [], []
        for i in range(count):
            (seed,) = struct.unpack("<Q", _read_exact(fh, 8, f"snapshot {i} seed"))
            if case == "kdvb":
                visc_a, disp_b = struct.unpack("<2d", _read_exact(fh, 16, f"snapshot {i} params"))
                (soliton_n,) = struct.unpack("<i", _read_exact(fh, 4, f"snapshot {i} params"))
                params.append(KdvbParams(visc_a, disp_b, soliton_n, seed))
            else:
                params.append(seed)
            raw = _read_exact(fh, 8 * point_count, f"snapshot {i} payload")
            values = np.frombuffer(raw, dtype="<f8").copy()
            if case == "kdvb":
                fields.append(Field1D(grid, values))
            else:
                fields.append(Field2D(grid, values.reshape(grid.ny, grid.nx)))
        if fh.read(1):
            raise DatasetError(f"{path}: trailing bytes after the last snapshot")
    train, test = split_indices(count, master_seed)
    return Dataset(case, grid, fields, params, master_seed, train, test)
