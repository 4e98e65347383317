"""Command-line entry point: generate, train, evaluate, compare, sweep, render.

Option precedence is flag > config file (--config, key=value lines) > the
OPSR_SEED environment variable (seeds only) > built-in default.  Diagnostics
go to stderr; results go to files and stdout.  Exit codes: 0 success,
1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import figures
from .datasets import DatasetError, generate_dataset, read_dataset, write_dataset
from .deeponet import CheckpointError, load_checkpoint, save_checkpoint
from .fields import Grid1D, Grid2D
from .nn import GradCheckReport
from .pooling import PoolingError, PoolingSpec, canonical_mode
from .report import (
    EvalReport,
    SweepAxes,
    evaluate_baseline,
    evaluate_model,
    report_file_name,
    sweep,
    write_field_pgm,
    write_report_csv,
)
from .simulate import KdvbSolverConfig, SolverError
from .training import TrainConfig, TrainingError, default_model_for_dataset, train, write_history

PROG = "opsr"
SEED_ENV_VAR = "OPSR_SEED"


class UsageError(Exception):
    """Bad flags or inconsistent options; reported before any work starts."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _parse_config_file(path: str) -> dict[str, str]:
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def _resolve(args, name: str, cast, default, config: dict[str, str], env_seed: bool = False):
    """flag > config file > OPSR_SEED (seeds only) > default."""
    value = getattr(args, name)
    if value is not None:
        return value
    if name in config:
        try:
            return cast(config[name])
        except ValueError as exc:
            raise UsageError(f"config key {name}: {exc}") from None
    if env_seed and os.environ.get(SEED_ENV_VAR):
        try:
            return int(os.environ[SEED_ENV_VAR])
        except ValueError:
            raise UsageError(f"{SEED_ENV_VAR} must be an integer") from None
    return default


def _int_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(tok) for tok in text.split(",") if tok.strip())
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise UsageError("expected at least one integer")
    return values


def _require_file(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _dataset_out_path(out: str, case: str, n: int, seed: int) -> Path:
    path = Path(out)
    if out.endswith(("/", os.sep)) or path.is_dir():
        path.mkdir(parents=True, exist_ok=True)
        return path / f"{case}_n{n}_s{seed}.osrd"
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _check_window_for(dataset, m: int) -> None:
    grid = dataset.grid
    if isinstance(grid, Grid1D):
        if m < 1 or grid.n_points % m:
            raise UsageError(f"M={m} does not divide the 1D resolution {grid.n_points}")
    else:
        if m < 1 or grid.nx % m or grid.ny % m:
            raise UsageError(f"M={m} does not divide the 2D resolution {grid.nx}x{grid.ny}")


def _with_suffix(path: str, suffix: str) -> str:
    return str(Path(path).with_suffix(suffix))


# ---------------------------------------------------------------------------
# subcommands

def _add_config_flag(sub):
    sub.add_argument("--config", help="key=value config file; flags win (default: none)")


def _build_parser() -> _Parser:
    parser = _Parser(prog=PROG, description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", metavar="COMMAND")

    g = subs.add_parser("gen", help="generate a seeded snapshot dataset", prog=f"{PROG} gen")
    g.add_argument("--case", choices=("kdvb", "poisson"), required=True, help="problem family")
    g.add_argument("--n", type=int, help="snapshot count (default: 100)")
    g.add_argument("--seed", type=int, help=f"master seed (default: ${SEED_ENV_VAR} or 0)")
    g.add_argument("--out", required=True, help="output .osrd file, or a directory")
    g.add_argument("--n-grid", type=int, help="1D grid points, power of two (default: 1024)")
    g.add_argument("--dt", type=float, help="1D time step (default: 2.5e-4)")
    g.add_argument("--t-final", type=float, help="1D snapshot time (default: 1.0)")
    g.add_argument("--nx", type=int, help="2D x resolution (default: 128)")
    g.add_argument("--ny", type=int, help="2D y resolution (default: 128)")
    g.add_argument("--jobs", type=int, help="max parallel solver workers (default: 1)")
    _add_config_flag(g)

    t = subs.add_parser("train", help="train a model on a dataset", prog=f"{PROG} train")
    t.add_argument("--data", required=True, help="input .osrd dataset")
    t.add_argument("--mode", help="pooling mode, avg or max (default: avg)")
    t.add_argument("--m", type=int, help="pooling window (default: 8)")
    t.add_argument("--out", required=True, help="output .osrm checkpoint")
    t.add_argument("--epochs", type=int, help="training epochs (default: 1000)")
    t.add_argument("--seed", type=int, help=f"training seed (default: ${SEED_ENV_VAR} or 0)")
    t.add_argument("--lr", type=float, help="Adam learning rate (default: 1e-3)")
    t.add_argument("--batch-snapshots", type=int, help="snapshots per step (default: 16)")
    t.add_argument("--batch-points", type=int, help="query points per snapshot (default: 128)")
    t.add_argument("--n-train", type=int, help="cap on training snapshots (default: all)")
    t.add_argument("--eval-every", type=int, help="epochs between test evals (default: 0 = off)")
    t.add_argument(
        "--checkpoint-every", type=int, help="epochs between checkpoint writes (default: 0 = off)"
    )
    t.add_argument("--history", help="write per-epoch history CSV (+ figure) here (default: none)")
    _add_config_flag(t)

    e = subs.add_parser("eval", help="evaluate a checkpoint on the test split", prog=f"{PROG} eval")
    e.add_argument("--data", required=True, help="input .osrd dataset")
    e.add_argument("--ckpt", required=True, help="input .osrm checkpoint")
    e.add_argument("--out", required=True, help="output CSV (a .png figure lands alongside)")
    _add_config_flag(e)

    b = subs.add_parser(
        "baseline", help="evaluate the spline baseline on the test split", prog=f"{PROG} baseline"
    )
    b.add_argument("--data", required=True, help="input .osrd dataset")
    b.add_argument("--mode", help="pooling mode, avg or max (default: avg)")
    b.add_argument("--m", type=int, help="pooling window (default: 8)")
    b.add_argument("--out", required=True, help="output CSV (a .png figure lands alongside)")
    _add_config_flag(b)

    s = subs.add_parser(
        "sweep", help="train/evaluate across modes, windows, and sizes", prog=f"{PROG} sweep"
    )
    s.add_argument("--data", required=True, help="input .osrd dataset")
    s.add_argument("--out", required=True, help="output directory for CSVs, figures, checkpoints")
    s.add_argument("--sizes", help="training-set sizes, comma list (default: 45,90,225,450,900)")
    s.add_argument("--ms", help="pooling windows, comma list (default: 8,16,32 1D / 4,8,16 2D)")
    s.add_argument("--modes", help="pooling modes, comma list (default: avg,max)")
    s.add_argument("--epochs", type=int, help="epochs per cell (default: 1000)")
    s.add_argument("--seed", type=int, help=f"base seed (default: ${SEED_ENV_VAR} or 0)")
    s.add_argument("--lr", type=float, help="Adam learning rate (default: 1e-3)")
    s.add_argument("--batch-snapshots", type=int, help="snapshots per step (default: 16)")
    s.add_argument("--batch-points", type=int, help="query points per snapshot (default: 128)")
    _add_config_flag(s)

    r = subs.add_parser("render", help="render one snapshot to PGM + figure", prog=f"{PROG} render")
    r.add_argument("--data", required=True, help="input .osrd dataset")
    r.add_argument("--snapshot", type=int, help="snapshot index (default: 0)")
    r.add_argument("--out", required=True, help="output .pgm path (figure lands alongside)")
    _add_config_flag(r)

    subs.add_parser(
        "gradcheck", help="finite-difference check of every layer adjoint", prog=f"{PROG} gradcheck"
    )
    return parser


def _cmd_gen(args) -> int:
    config = _parse_config_file(args.config) if args.config else {}
    n = _resolve(args, "n", int, 100, config)
    seed = _resolve(args, "seed", int, 0, config, env_seed=True)
    jobs = _resolve(args, "jobs", int, 1, config)
    if n < 2:
        raise UsageError("--n must be at least 2")
    if jobs < 1:
        raise UsageError("--jobs must be at least 1")
    if args.case == "kdvb":
        solver_config = KdvbSolverConfig(
            n_grid=_resolve(args, "n_grid", int, 1024, config),
            dt=_resolve(args, "dt", float, 2.5e-4, config),
            t_final=_resolve(args, "t_final", float, 1.0, config),
        )
        grid = None
    else:
        solver_config = None
        grid = Grid2D(
            _resolve(args, "nx", int, 128, config), _resolve(args, "ny", int, 128, config)
        )
    out_path = _dataset_out_path(args.out, args.case, n, seed)
    _log(f"generating {n} {args.case} snapshots (seed {seed}, jobs {jobs})")
    dataset = generate_dataset(args.case, n, seed, solver_config=solver_config, grid=grid, jobs=jobs)
    write_dataset(dataset, out_path)
    _log(f"train/test split: {len(dataset.train_indices)}/{len(dataset.test_indices)}")
    print(out_path)
    return 0


def _train_config_from(args, config, dataset=None) -> TrainConfig:
    try:
        return TrainConfig(
            epochs=_resolve(args, "epochs", int, 1000, config),
            snapshots_per_batch=_resolve(args, "batch_snapshots", int, 16, config),
            points_per_snapshot=_resolve(args, "batch_points", int, 128, config),
            lr=_resolve(args, "lr", float, 1e-3, config),
            seed=_resolve(args, "seed", int, 0, config, env_seed=True),
            eval_every=_resolve(args, "eval_every", int, 0, config)
            if hasattr(args, "eval_every")
            else 0,
            checkpoint_every=_resolve(args, "checkpoint_every", int, 0, config)
            if hasattr(args, "checkpoint_every")
            else 0,
            n_train=_resolve(args, "n_train", int, None, config)
            if hasattr(args, "n_train")
            else None,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _cmd_train(args) -> int:
    config = _parse_config_file(args.config) if args.config else {}
    dataset = read_dataset(_require_file(args.data, "dataset"))
    mode = canonical_mode(_resolve(args, "mode", str, "avg", config))
    m = _resolve(args, "m", int, 8, config)
    _check_window_for(dataset, m)
    train_config = _train_config_from(args, config)
    spec = PoolingSpec(mode, m)
    model = default_model_for_dataset(dataset, spec, seed=train_config.seed)
    _log(
        f"training {dataset.case} model: mode={mode} M={m} "
        f"epochs={train_config.epochs} seed={train_config.seed} "
        f"({model.parameter_count()} parameters)"
    )
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    model, history = train(
        model,
        dataset,
        spec,
        train_config,
        checkpoint_path=str(out_path) if train_config.checkpoint_every else None,
        log=_log,
    )
    save_checkpoint(model, out_path)
    if args.history:
        write_history(history, args.history)
        figures.save_history_figure(history, _with_suffix(args.history, ".png"))
    print(out_path)
    return 0


def _eval_common(report: EvalReport, out: str, dataset_case: str) -> None:
    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(report, out_path)
    figures.save_epsilon_figure(report.records, _with_suffix(out, ".png"), title=dataset_case)
    for note in report.notes:
        _log(f"note: {note}")
    for row in report.aggregates():
        print(
            f"{dataset_case} mode={row.pool_mode} M={row.m} n_train={row.n_train} "
            f"method={row.method}: mean_eps={row.mean_epsilon:.6g} "
            f"log10={row.log10_mean_epsilon:.4f} ({row.count} snapshots)"
        )


def _cmd_eval(args) -> int:
    dataset = read_dataset(_require_file(args.data, "dataset"))
    model = load_checkpoint(_require_file(args.ckpt, "checkpoint"))
    if model.case != dataset.case:
        raise UsageError(f"checkpoint is for case {model.case}, dataset is {dataset.case}")
    _check_window_for(dataset, model.pool_m)
    spec = PoolingSpec(model.pool_mode, model.pool_m)
    report = evaluate_model(model, dataset, spec)
    _eval_common(report, args.out, dataset.case)
    return 0


def _cmd_baseline(args) -> int:
    config = _parse_config_file(args.config) if args.config else {}
    dataset = read_dataset(_require_file(args.data, "dataset"))
    mode = canonical_mode(_resolve(args, "mode", str, "avg", config))
    m = _resolve(args, "m", int, 8, config)
    _check_window_for(dataset, m)
    report = evaluate_baseline(dataset, PoolingSpec(mode, m))
    _eval_common(report, args.out, dataset.case)
    return 0


def _cmd_sweep(args) -> int:
    config = _parse_config_file(args.config) if args.config else {}
    dataset = read_dataset(_require_file(args.data, "dataset"))
    defaults = SweepAxes.default_for(dataset)
    sizes_text = _resolve(args, "sizes", str, None, config)
    ms_text = _resolve(args, "ms", str, None, config)
    modes_text = _resolve(args, "modes", str, None, config)
    axes = SweepAxes(
        modes=tuple(canonical_mode(tok) for tok in modes_text.split(","))
        if modes_text
        else defaults.modes,
        ms=_int_list(ms_text) if ms_text else defaults.ms,
        n_train_list=_int_list(sizes_text) if sizes_text else defaults.n_train_list,
    )
    for m in axes.ms:
        _check_window_for(dataset, m)
    for size in axes.n_train_list:
        if size > len(dataset.train_indices):
            raise UsageError(
                f"--sizes includes {size} but only {len(dataset.train_indices)} "
                "training snapshots exist"
            )
    train_config = _train_config_from(args, config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def on_cell(mode, m, n_train, seed, model, cell_report):
        save_checkpoint(model, out_dir / f"{dataset.case}_{mode}_M{m}_n{n_train}_model.osrm")
        for method in ("deeponet", "spline"):
            subset = EvalReport(
                cell_report.case, [r for r in cell_report.records if r.method == method]
            )
            write_report_csv(
                subset, out_dir / report_file_name(dataset.case, mode, m, n_train, method)
            )
        _log(f"finished cell mode={mode} M={m} n_train={n_train} (seed {seed})")

    combined = sweep(dataset, axes, train_config, on_cell=on_cell, log=_log)
    write_report_csv(combined, out_dir / f"{dataset.case}_sweep_records.csv")
    rows = combined.aggregates()
    summary_path = out_dir / f"{dataset.case}_sweep_summary.csv"
    with open(summary_path, "w") as fh:
        fh.write("case,pool_mode,M,n_train,method,count,mean_epsilon,log10_mean_epsilon\n")
        for row in rows:
            fh.write(
                f"{dataset.case},{row.pool_mode},{row.m},{row.n_train},{row.method},"
                f"{row.count},{row.mean_epsilon!r},{row.log10_mean_epsilon!r}\n"
            )
    max_size = max(axes.n_train_list)
    figures.save_error_vs_window_figure(
        [r for r in rows if r.n_train == max_size],
        out_dir / f"{dataset.case}_error_vs_window.png",
        title=f"{dataset.case} test error by pooling window (n_train={max_size})",
    )
    figures.save_error_vs_size_figure(
        [r for r in rows if r.m == axes.ms[min(1, len(axes.ms) - 1)]],
        out_dir / f"{dataset.case}_error_vs_size.png",
        title=f"{dataset.case} test error by training-set size (M={axes.ms[min(1, len(axes.ms) - 1)]})",
    )
    for note in combined.notes:
        _log(f"note: {note}")
    for row in rows:
        print(
            f"{dataset.case} mode={row.pool_mode} M={row.m} n_train={row.n_train} "
            f"method={row.method}: mean_eps={row.mean_epsilon:.6g} "
            f"log10={row.log10_mean_epsilon:.4f}"
        )
    return 0


def _cmd_render(args) -> int:
    config = _parse_config_file(args.config) if args.config else {}
    dataset = read_dataset(_require_file(args.data, "dataset"))
    index = _resolve(args, "snapshot", int, 0, config)
    if not 0 <= index < dataset.n_snapshots:
        raise UsageError(
            f"--snapshot {index} out of range (dataset has {dataset.n_snapshots} snapshots)"
        )
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    field_obj = dataset.fields[index]
    write_field_pgm(field_obj, out_path)
    figures.save_field_figure(
        field_obj, _with_suffix(args.out, ".png"), title=f"{dataset.case} snapshot {index}"
    )
    print(out_path)
    return 0


def _gradcheck_report() -> list[tuple[str, GradCheckReport]]:
    from .deeponet import (
        DeepONet1DConfig,
        DeepONet2DConfig,
        DeepONetLossModel,
        build_deeponet_1d,
        build_deeponet_2d,
    )
    from .nn import (
        ActivationLayer,
        BatchNormLayer,
        Flatten,
        LossModel,
        ReplicateChannels,
        Stack,
        grad_check,
        init_conv,
        init_dense,
    )

    rng = np.random.default_rng(20260808)
    checks = []

    def add(name, stack, x, t, train=False):
        checks.append((name, grad_check(LossModel(stack, train_mode=train), x, t)))

    x = rng.normal(size=(6, 5))
    add("dense relu", Stack([init_dense(rng, 5, 4, "relu")]), x, rng.normal(size=(6, 4)))
    add("dense softplus", Stack([init_dense(rng, 5, 4, "softplus")]), x, rng.normal(size=(6, 4)))
    add("dense identity", Stack([init_dense(rng, 5, 4, "identity")]), x, rng.normal(size=(6, 4)))
    xc = rng.normal(size=(4, 3, 5, 5))
    add("conv k=1", Stack([init_conv(rng, 3, 2, 1)]), xc, rng.normal(size=(4, 2, 5, 5)))
    add("conv k=2", Stack([init_conv(rng, 3, 2, 2)]), xc, rng.normal(size=(4, 2, 4, 4)))
    bn = BatchNormLayer(3)
    bn.gamma[:] = rng.normal(size=3)
    bn.beta[:] = rng.normal(size=3)
    add("batchnorm (train)", Stack([bn]), xc, rng.normal(size=xc.shape), train=True)
    composite = Stack(
        [
            ReplicateChannels(6),
            init_conv(rng, 6, 4, 2),
            BatchNormLayer(4),
            ActivationLayer("softplus"),
            Flatten(),
            init_dense(rng, 4 * 16, 3, "identity"),
        ]
    )
    add(
        "conv+batchnorm+softplus (train)",
        composite,
        rng.normal(size=(4, 1, 5, 5)),
        rng.normal(size=(4, 3)),
        train=True,
    )

    model_1d = build_deeponet_1d(
        DeepONet1DConfig(input_width=8, branch_hidden=(10, 10), trunk_hidden=(9, 9), p=6), seed=1
    )
    checks.append(
        (
            "deeponet 1d (full assembly)",
            grad_check(
                DeepONetLossModel(model_1d),
                (rng.normal(size=(3, 8)), rng.uniform(0, 10, size=(3, 5, 1))),
                rng.normal(size=(3, 5)),
            ),
        )
    )
    model_2d = build_deeponet_2d(
        DeepONet2DConfig(
            input_shape=(4, 4),
            replicate_channels=6,
            conv1_channels=5,
            conv2_channels=4,
            mlp_hidden=(8, 8, 8),
            trunk_hidden=(8, 8),
            p=5,
        ),
        seed=2,
    )
    checks.append(
        (
            "deeponet 2d (full assembly, train)",
            grad_check(
                DeepONetLossModel(model_2d, train_mode=True),
                (rng.normal(size=(4, 4, 4)), rng.uniform(0, np.pi, size=(4, 6, 2))),
                rng.normal(size=(4, 6)),
            ),
        )
    )
    return checks


def _cmd_gradcheck(args) -> int:
    checks = _gradcheck_report()
    width = max(len(name) for name, _ in checks)
    failures = 0
    for name, report in checks:
        tolerance = 1e-5 if "train" in name else 1e-6
        status = "ok" if report.passed(tolerance) else "FAIL"
        if status == "FAIL":
            failures += 1
        print(f"{name:<{width}}  max_rel_err {report.max_rel_err:.3e}  [{status}]")
    if failures:
        _log(f"{failures} gradient check(s) failed")
        return 2
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "baseline": _cmd_baseline,
    "sweep": _cmd_sweep,
    "render": _cmd_render,
    "gradcheck": _cmd_gradcheck,
}


def run(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, PoolingError) as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 1
    except (SolverError, TrainingError, DatasetError, CheckpointError, OSError) as exc:
        print(f"{PROG}: failure: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
