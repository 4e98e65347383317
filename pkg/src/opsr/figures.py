"""Matplotlib figure rendering for the report path.

Every figure writer takes already-computed data and a destination path;
nothing here recomputes results.  The Agg backend keeps rendering headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .fields import Field, Field1D
from .report import AggregateRow, EvalRecord
from .training import HistoryEntry

_METHOD_STYLE = {
    "deeponet": dict(color="tab:blue", marker="o"),
    "spline": dict(color="tab:orange", marker="s"),
}


def _style(method: str, mode: str) -> dict:
    style = dict(_METHOD_STYLE.get(method, dict(color="tab:gray", marker="x")))
    style["linestyle"] = "-" if mode == "avg" else "--"
    return style


def save_field_figure(field_obj: Field, path, title: str | None = None) -> None:
    """Line plot for 1D fields, heatmap with colorbar for 2D."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    if isinstance(field_obj, Field1D):
        ax.plot(field_obj.grid.coords(), field_obj.values, lw=1.0)
        ax.set_xlabel("x")
        ax.set_ylabel("u")
    else:
        g = field_obj.grid
        im = ax.imshow(
            field_obj.values,
            origin="lower",
            extent=(g.x_min, g.x_max, g.y_min, g.y_max),
            aspect="auto",
            cmap="viridis",
        )
        fig.colorbar(im, ax=ax)
        ax.set_xlabel("x")
        ax.set_ylabel("y")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_history_figure(history: list[HistoryEntry], path) -> None:
    """Training loss (and test error when recorded) against epoch."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    epochs = [h.epoch for h in history]
    ax.semilogy(epochs, [h.mean_loss for h in history], color="tab:blue", label="train MSE")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    eval_points = [(h.epoch, h.test_epsilon) for h in history if h.test_epsilon is not None]
    if eval_points:
        ax2 = ax.twinx()
        ax2.semilogy(
            [e for e, _ in eval_points],
            [v for _, v in eval_points],
            color="tab:orange",
            marker="o",
            label="test rel. L2",
        )
        ax2.set_ylabel("test relative L2 error")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_epsilon_figure(records: list[EvalRecord], path, title: str | None = None) -> None:
    """Per-snapshot relative L2 error, one marker series per method."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    methods = sorted({r.method for r in records})
    for method in methods:
        pts = [(r.snapshot_id, r.epsilon) for r in records if r.method == method]
        style = _METHOD_STYLE.get(method, dict(color="tab:gray", marker="x"))
        ax.semilogy(
            [p[0] for p in pts],
            [p[1] for p in pts],
            linestyle="none",
            label=method,
            **style,
        )
    ax.set_xlabel("snapshot")
    ax.set_ylabel("relative L2 error")
    if methods:
        ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_error_vs_window_figure(rows: list[AggregateRow], path, title: str | None = None) -> None:
    """log10 of the mean test error against the pooling window M."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    keys = sorted({(r.method, r.pool_mode) for r in rows})
    for method, mode in keys:
        pts = sorted((r.m, r.log10_mean_epsilon) for r in rows
                     if r.method == method and r.pool_mode == mode)
        ax.plot([p[0] for p in pts], [p[1] for p in pts],
                label=f"{method} ({mode} pool)", **_style(method, mode))
    ms = sorted({r.m for r in rows})
    ax.set_xscale("log", base=2)
    ax.set_xticks(ms, [str(m) for m in ms])
    ax.set_xlabel("pooling window M")
    ax.set_ylabel("log10 mean relative L2 error")
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_error_vs_size_figure(rows: list[AggregateRow], path, title: str | None = None) -> None:
    """Mean test error against the training-set size."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    keys = sorted({(r.method, r.pool_mode) for r in rows})
    for method, mode in keys:
        pts = sorted((r.n_train, r.mean_epsilon) for r in rows
                     if r.method == method and r.pool_mode == mode)
        ax.semilogy([p[0] for p in pts], [p[1] for p in pts],
                    label=f"{method} ({mode} pool)", **_style(method, mode))
    ax.set_xlabel("training snapshots")
    ax.set_ylabel("mean relative L2 error")
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
