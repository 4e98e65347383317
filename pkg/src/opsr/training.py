"""The optimization loop: batch assembly, Adam training, history records.

Batches draw a fixed number of training snapshots and, for each, a without-
replacement subsample of HR query points; the MSE over those point
predictions is an unbiased estimate of the full objective.  All sampling is
seeded by (config.seed, epoch, step), so training is bit-reproducible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .datasets import Dataset
from .deeponet import (
    DeepONet1DConfig,
    DeepONet2DConfig,
    DeepONetModel,
    build_deeponet_1d,
    build_deeponet_2d,
    grid_query_coords,
    predict_field,
    save_checkpoint,
)
from .fields import Grid1D, relative_l2_error
from .nn import adam_init, adam_step, mse_loss
from .pooling import PoolingSpec, pool
from .rng import make_rng

_PERM_TAG = 3
_POINT_TAG = 4


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or invalid configuration)."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    snapshots_per_batch: int = 16
    points_per_snapshot: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    n_train: int | None = None

    def __post_init__(self):
        if min(self.epochs, self.snapshots_per_batch, self.points_per_snapshot) < 1:
            raise ValueError("epochs and batch sizes must be positive")
        if self.eval_every < 0 or self.checkpoint_every < 0:
            raise ValueError("cadences must be >= 0")
        if self.n_train is not None and self.n_train < 1:
            raise ValueError("n_train must be positive when set")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive when set")


@dataclass(frozen=True)
class Batch:
    snapshot_indices: np.ndarray
    point_indices: np.ndarray  # [B, points_per_snapshot]


@dataclass(frozen=True)
class HistoryEntry:
    epoch: int
    mean_loss: float
    test_epsilon: float | None = None


def training_snapshot_ids(dataset: Dataset, config: TrainConfig) -> list[int]:
    ids = dataset.train_indices
    if config.n_train is not None:
        if config.n_train > len(ids):
            raise TrainingError(
                f"n_train={config.n_train} exceeds the {len(ids)} available training snapshots"
            )
        ids = ids[: config.n_train]
    return ids


def assemble_batches(
    dataset: Dataset, spec: PoolingSpec, config: TrainConfig, epoch: int
) -> list[Batch]:
    """Deterministic batch plan for one epoch.

    Snapshots are permuted per (seed, epoch) and chunked; a trailing chunk of
    one snapshot is merged into its predecessor so train-mode batchnorm always
    sees at least two samples.  Query points are drawn without replacement
    within each snapshot, seeded per (seed, epoch, step).
    """
    n_points = dataset.hr_point_count()
    if dataset.hr_point_count() % spec.window and isinstance(dataset.grid, Grid1D):
        raise TrainingError(f"M={spec.window} incompatible with resolution {n_points}")
    if config.points_per_snapshot > n_points:
        raise TrainingError(
            f"points_per_snapshot={config.points_per_snapshot} exceeds the "
            f"{n_points} HR points per snapshot"
        )
    ids = np.asarray(training_snapshot_ids(dataset, config))
    perm = make_rng(config.seed, _PERM_TAG, epoch).permutation(len(ids))
    shuffled = ids[perm]
    chunks = [
        shuffled[i : i + config.snapshots_per_batch]
        for i in range(0, len(shuffled), config.snapshots_per_batch)
    ]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    batches = []
    for step, chunk in enumerate(chunks):
        rng = make_rng(config.seed, _POINT_TAG, epoch, step)
        points = np.stack(
            [rng.choice(n_points, size=config.points_per_snapshot, replace=False) for _ in chunk]
        )
        batches.append(Batch(chunk, points))
    return batches


def default_model_for_dataset(
    dataset: Dataset, spec: PoolingSpec, seed: int = 0, **overrides
) -> DeepONetModel:
    """Build the default architecture matched to the dataset's pooled size."""
    if dataset.case == "kdvb":
        width = dataset.grid.n_points // spec.window
        model = build_deeponet_1d(DeepONet1DConfig(input_width=width, **overrides), seed=seed)
    else:
        shape = (dataset.grid.ny // spec.window, dataset.grid.nx // spec.window)
        model = build_deeponet_2d(DeepONet2DConfig(input_shape=shape, **overrides), seed=seed)
    model.pool_mode = spec.mode
    model.pool_m = spec.window
    return model


def evaluate_test_epsilon(model: DeepONetModel, dataset: Dataset, spec: PoolingSpec) -> float:
    """Mean relative L2 error of the model over the dataset's test snapshots."""
    eps = []
    for idx in dataset.test_indices:
        target = dataset.fields[idx]
        prediction = predict_field(model, pool(target, spec, source_id=idx), dataset.grid)
        eps.append(relative_l2_error(target, prediction))
    if not eps:
        raise TrainingError("dataset has no test snapshots")
    return float(np.mean(eps))


def train(
    model: DeepONetModel,
    dataset: Dataset,
    spec: PoolingSpec,
    config: TrainConfig,
    history_path=None,
    checkpoint_path=None,
    log=None,
) -> tuple[DeepONetModel, list[HistoryEntry]]:
    """Minimize the MSE objective with Adam; returns the model and history.

    Branch-input normalization stats are frozen from the training pooled
    inputs before the first step.  On a non-finite loss the parameters are
    restored to the last completed epoch and TrainingError is raised (any
    cadenced checkpoint already on disk is untouched).
    """
    train_ids = training_snapshot_ids(dataset, config)
    pooled = {i: pool(dataset.fields[i], spec, source_id=i).values for i in train_ids}
    sample_shape = next(iter(pooled.values())).shape
    expected = (
        (model.config.input_width,)
        if isinstance(model.config, DeepONet1DConfig)
        else model.config.input_shape
    )
    if sample_shape != expected:
        raise TrainingError(
            f"model expects pooled input {expected}, dataset/M gives {sample_shape}"
        )
    all_values = np.stack([pooled[i] for i in train_ids])
    model.in_mean = float(all_values.mean())
    model.in_std = float(all_values.std())
    model.pool_mode = spec.mode
    model.pool_m = spec.window

    coords = grid_query_coords(dataset.grid)
    targets = {i: dataset.fields[i].values.ravel() for i in train_ids}
    adam = adam_init(model.parameters(), config.lr, config.beta1, config.beta2, config.eps)
    history: list[HistoryEntry] = []
    last_good = [p.copy() for p in model.parameters()]

    for epoch in range(1, config.epochs + 1):
        sq_sum = 0.0
        n_seen = 0
        for batch in assemble_batches(dataset, spec, config, epoch):
            u_batch = np.stack([pooled[i] for i in batch.snapshot_indices])
            y_batch = coords[batch.point_indices]
            t_batch = np.stack(
                [targets[i][pts] for i, pts in zip(batch.snapshot_indices, batch.point_indices)]
            )
            pred = model.forward_batch(u_batch, y_batch, train=True)
            loss, d_pred = mse_loss(pred, t_batch)
            if not np.isfinite(loss):
                for p, saved in zip(model.parameters(), last_good):
                    p[...] = saved
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}; parameters restored to epoch {epoch - 1}"
                )
            model.zero_grads()
            model.backward_batch(d_pred)
            grads = model.gradients()
            if config.clip_norm is not None:
                total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
                if total > config.clip_norm:
                    scale = config.clip_norm / total
                    for g in grads:
                        g *= scale
            adam_step(adam, model.parameters(), grads)
            sq_sum += loss * pred.size
            n_seen += pred.size
        mean_loss = sq_sum / n_seen
        test_eps = None
        if config.eval_every and epoch % config.eval_every == 0:
            test_eps = evaluate_test_epsilon(model, dataset, spec)
        history.append(HistoryEntry(epoch, mean_loss, test_eps))
        for p, saved in zip(model.parameters(), last_good):
            saved[...] = p
        if log is not None:
            msg = f"epoch {epoch}/{config.epochs} loss {mean_loss:.6g}"
            if test_eps is not None:
                msg += f" test_eps {test_eps:.6g}"
            log(msg)
        if checkpoint_path and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_checkpoint(model, checkpoint_path, adam_state=adam)

    if history_path:
        write_history(history, history_path)
    return model, history


def write_history(history: list[HistoryEntry], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "test_epsilon"])
        for entry in history:
            eps = "" if entry.test_epsilon is None else repr(entry.test_epsilon)
            writer.writerow([entry.epoch, repr(entry.mean_loss), eps])


def read_history(path) -> list[HistoryEntry]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            eps = row["test_epsilon"]
            out.append(
                HistoryEntry(
                    int(row["epoch"]),
                    float(row["mean_loss"]),
                    None if eps == "" else float(eps),
                )
            )
    return out
