"""Matplotlib renderings written next to the delimited report files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

# keep PNG bytes reproducible across runs of the same matplotlib build
_META = {"Software": None}


def save_training_curves(log, path) -> None:
    epochs = [r.epoch for r in log.records]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(epochs, [r.train_loss for r in log.records], color="tab:blue")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss")
    ax2.plot(epochs, [r.val_mae for r in log.records], color="tab:orange")
    if log.best_epoch:
        ax2.axvline(log.best_epoch, color="gray", linestyle=":", linewidth=1)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation MAE")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)


def save_heatmap(matrix: np.ndarray, path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(4.6, 4.0))
    im = ax.imshow(np.asarray(matrix), cmap="viridis", aspect="equal")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)


def save_per_step_metrics(report, path) -> None:
    steps = np.arange(1, len(report.per_step) + 1)
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.0))
    for ax, key, label in zip(axes, ("mae", "rmse", "mape"), ("MAE", "RMSE", "MAPE %")):
        ax.plot(steps, [getattr(s, key) for s in report.per_step], marker="o", markersize=3)
        ax.set_xlabel("horizon step")
        ax.set_ylabel(label)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)


def save_series_pair(series_a: np.ndarray, series_b: np.ndarray,
                     labels: tuple[str, str], path) -> None:
    fig, ax = plt.subplots(figsize=(9, 3.0))
    ax.plot(series_a, label=labels[0], linewidth=0.9)
    ax.plot(series_b, label=labels[1], linewidth=0.9)
    ax.set_xlabel("time step")
    ax.set_ylabel("value")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)


def save_forecast_sample(pred: np.ndarray, truth: np.ndarray, path,
                         title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(9, 3.0))
    ax.plot(truth, label="observed", linewidth=0.9)
    ax.plot(pred, label="forecast", linewidth=0.9)
    if title:
        ax.set_title(title)
    ax.set_xlabel("time step")
    ax.set_ylabel("value")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)
