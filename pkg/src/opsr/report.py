"""Per-snapshot and aggregate evaluation, sweeps, and report emission.

The metric is the relative L2 error of the reconstructed HR field against
the stored ground truth.  Aggregation over a test set reports both the mean
error and log10 of that mean (the log is taken after averaging).  Reports
serialize to CSV with the column set

    case,pool_mode,M,n_train,snapshot_id,method,epsilon

and fields render to binary P5 PGM images with per-image min-max
normalization.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .datasets import Dataset
from .deeponet import DeepONet1DConfig, DeepONetModel, predict_field
from .fields import Field, Field1D, relative_l2_error
from .pooling import PoolingSpec, pool
from .rng import derive_seed
from .spline import bicubic_reconstruct_2d, bicubic_uses_fallback, spline_reconstruct_1d
from .training import TrainConfig, default_model_for_dataset, train

METHOD_DEEPONET = "deeponet"
METHOD_SPLINE = "spline"

CSV_HEADER = ["case", "pool_mode", "M", "n_train", "snapshot_id", "method", "epsilon"]

# Documented full-scale reference points (900 training snapshots, 128x128
# grids, M=8 max pooling): context for reading desk-scale reports, never
# asserted by tests -- absolute values do not transfer across dataset draws.
FULL_SCALE_REFERENCE = {
    ("poisson", "max", 8, METHOD_SPLINE): 1.0354,
    ("poisson", "max", 8, METHOD_DEEPONET): 0.1076,
}

DEFAULT_M_AXIS = {"kdvb": (8, 16, 32), "poisson": (4, 8, 16)}
DEFAULT_SIZE_AXIS = (45, 90, 225, 450, 900)

_CELL_TAG = 0xCE11


class ReportError(IOError):
    """Report I/O or schema problems."""


@dataclass(frozen=True)
class EvalRecord:
    snapshot_id: int
    method: str
    pool_mode: str
    m: int
    epsilon: float
    n_train: int

    def __post_init__(self):
        if not (math.isfinite(self.epsilon) and self.epsilon >= 0.0):
            raise ReportError(f"epsilon must be finite and >= 0, got {self.epsilon}")


@dataclass(frozen=True)
class AggregateRow:
    method: str
    pool_mode: str
    m: int
    n_train: int
    count: int
    mean_epsilon: float
    log10_mean_epsilon: float


@dataclass
class EvalReport:
    case: str
    records: list[EvalRecord] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def extend(self, other: "EvalReport"):
        if other.case != self.case:
            raise ReportError("cannot merge reports across cases")
        self.records.extend(other.records)
        self.notes.extend(other.notes)

    def mean_epsilon(self) -> float:
        if not self.records:
            raise ReportError("empty report has no mean")
        return float(np.mean([r.epsilon for r in self.records]))

    def aggregates(self) -> list[AggregateRow]:
        """Mean and log10(mean) epsilon per (method, mode, M, n_train) cell."""
        groups: dict[tuple, list[float]] = {}
        order: list[tuple] = []
        for r in self.records:
            key = (r.method, r.pool_mode, r.m, r.n_train)
            if key not in groups:
                groups[key] = []
                order.append(key)
            groups[key].append(r.epsilon)
        rows = []
        for key in order:
            eps = groups[key]
            mean = float(np.mean(eps))
            log_mean = math.log10(mean) if mean > 0.0 else -math.inf
            rows.append(AggregateRow(*key, len(eps), mean, log_mean))
        return rows


def evaluate_model(
    model: DeepONetModel,
    dataset: Dataset,
    spec: PoolingSpec,
    n_train: int | None = None,
    indices: list[int] | None = None,
) -> EvalReport:
    """Pool, predict, and score each test snapshot with the trained model."""
    expected = (
        (model.config.input_width,)
        if isinstance(model.config, DeepONet1DConfig)
        else model.config.input_shape
    )
    n_train = len(dataset.train_indices) if n_train is None else n_train
    indices = dataset.test_indices if indices is None else indices
    report = EvalReport(dataset.case)
    for idx in indices:
        target = dataset.fields[idx]
        pooled = pool(target, spec, source_id=idx)
        if pooled.values.shape != expected:
            raise ReportError(
                f"M={spec.window} gives pooled shape {pooled.values.shape}, "
                f"model expects {expected}"
            )
        eps = relative_l2_error(target, predict_field(model, pooled, dataset.grid))
        report.records.append(
            EvalRecord(idx, METHOD_DEEPONET, spec.mode, spec.window, eps, n_train)
        )
    return report


def evaluate_baseline(
    dataset: Dataset,
    spec: PoolingSpec,
    n_train: int | None = None,
    indices: list[int] | None = None,
) -> EvalReport:
    """Pool and spline-reconstruct each test snapshot."""
    n_train = len(dataset.train_indices) if n_train is None else n_train
    indices = dataset.test_indices if indices is None else indices
    report = EvalReport(dataset.case)
    fell_back = False
    for idx in indices:
        target = dataset.fields[idx]
        pooled = pool(target, spec, source_id=idx)
        if isinstance(target, Field1D):
            reconstruction = spline_reconstruct_1d(pooled, dataset.grid)
        else:
            if bicubic_uses_fallback(pooled):
                fell_back = True
            reconstruction = bicubic_reconstruct_2d(pooled, dataset.grid)
        eps = relative_l2_error(target, reconstruction)
        report.records.append(
            EvalRecord(idx, METHOD_SPLINE, spec.mode, spec.window, eps, n_train)
        )
    if fell_back:
        report.notes.append(
            f"bicubic fell back to separable linear interpolation at M={spec.window} "
            "(pooled grid narrower than 4 points)"
        )
    return report


@dataclass(frozen=True)
class SweepAxes:
    modes: tuple[str, ...]
    ms: tuple[int, ...]
    n_train_list: tuple[int, ...]

    @staticmethod
    def default_for(dataset: Dataset) -> "SweepAxes":
        available = len(dataset.train_indices)
        sizes = tuple(s for s in DEFAULT_SIZE_AXIS if s <= available) or (available,)
        return SweepAxes(("avg", "max"), DEFAULT_M_AXIS[dataset.case], sizes)


def cell_seed(base_seed: int, mode: str, m: int, n_train: int) -> int:
    """The reproducible model seed of one sweep cell."""
    return derive_seed(base_seed, _CELL_TAG, 0 if mode == "avg" else 1, m, n_train)


def sweep(
    dataset: Dataset,
    axes: SweepAxes,
    config: TrainConfig,
    on_cell=None,
    log=None,
) -> EvalReport:
    """Train one model per (mode, M, n_train) cell and score both methods.

    Baseline scores are computed once per (mode, M) and restamped with each
    cell's n_train so every cell carries both methods.  ``on_cell(mode, m,
    n_train, seed, model, cell_report)`` is invoked after each cell, e.g. to
    persist checkpoints.
    """
    available = len(dataset.train_indices)
    for size in axes.n_train_list:
        if size > available:
            raise ReportError(f"n_train={size} exceeds {available} training snapshots")
    combined = EvalReport(dataset.case)
    baseline_cache: dict[tuple[str, int], EvalReport] = {}
    for mode in axes.modes:
        for m in axes.ms:
            spec = PoolingSpec(mode, m)
            if (mode, m) not in baseline_cache:
                baseline_cache[(mode, m)] = evaluate_baseline(dataset, spec)
            base = baseline_cache[(mode, m)]
            for n_train in axes.n_train_list:
                seed = cell_seed(config.seed, spec.mode, m, n_train)
                cell_config = TrainConfig(
                    epochs=config.epochs,
                    snapshots_per_batch=config.snapshots_per_batch,
                    points_per_snapshot=config.points_per_snapshot,
                    lr=config.lr,
                    beta1=config.beta1,
                    beta2=config.beta2,
                    eps=config.eps,
                    seed=seed,
                    n_train=n_train,
                )
                model = default_model_for_dataset(dataset, spec, seed=seed)
                if log is not None:
                    log(f"sweep cell mode={spec.mode} M={m} n_train={n_train} seed={seed}")
                model, _ = train(model, dataset, spec, cell_config)
                cell = evaluate_model(model, dataset, spec, n_train=n_train)
                for record in base.records:
                    cell.records.append(
                        EvalRecord(
                            record.snapshot_id,
                            record.method,
                            record.pool_mode,
                            record.m,
                            record.epsilon,
                            n_train,
                        )
                    )
                cell.notes.extend(base.notes)
                if on_cell is not None:
                    on_cell(spec.mode, m, n_train, seed, model, cell)
                combined.extend(cell)
    return combined


# ---------------------------------------------------------------------------
# emission

def report_file_name(case: str, mode: str, m: int, n_train: int, method: str) -> str:
    return f"{case}_{mode}_M{m}_n{n_train}_{method}.csv"


def write_report_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in report.records:
            writer.writerow(
                [report.case, r.pool_mode, r.m, r.n_train, r.snapshot_id, r.method, repr(r.epsilon)]
            )


def read_report_csv(path) -> EvalReport:
    records = []
    case = None
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ReportError(f"{path}: unexpected CSV header {reader.fieldnames}")
        for row in reader:
            case = row["case"] if case is None else case
            if row["case"] != case:
                raise ReportError(f"{path}: mixed cases in one report")
            records.append(
                EvalRecord(
                    int(row["snapshot_id"]),
                    row["method"],
                    row["pool_mode"],
                    int(row["M"]),
                    float(row["epsilon"]),
                    int(row["n_train"]),
                )
            )
    if case is None:
        raise ReportError(f"{path}: empty report")
    return EvalReport(case, records)


def write_field_pgm(field_obj: Field, path) -> None:
    """Binary P5, 8-bit, min-max normalized; constant fields map to 128.

    1D fields render as a one-row image and also write a companion CSV of
    (x, value) pairs next to the image.
    """
    values = field_obj.values
    if isinstance(field_obj, Field1D):
        raster = values[None, :]
    else:
        raster = values
    lo, hi = float(raster.min()), float(raster.max())
    if hi > lo:
        bytes_ = np.rint((raster - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        bytes_ = np.full(raster.shape, 128, dtype=np.uint8)
    height, width = bytes_.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(bytes_.tobytes())
    if isinstance(field_obj, Field1D):
        companion = _companion_csv_path(path)
        with open(companion, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "value"])
            for x, v in zip(field_obj.grid.coords(), values):
                writer.writerow([repr(float(x)), repr(float(v))])


def _companion_csv_path(path) -> str:
    text = str(path)
    if text.lower().endswith(".pgm"):
        return text[:-4] + ".csv"
    return text + ".csv"
