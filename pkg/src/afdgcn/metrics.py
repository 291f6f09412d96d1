"""Forecast error metrics in original units, per horizon step and averaged."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class StepMetrics:
    mae: float
    rmse: float
    mape: float  # percent; NaN when every entry was masked


@dataclass
class MetricsReport:
    """MAE / RMSE / MAPE aggregated and per horizon step.

    MAPE excludes entries whose ground truth is at or below the mask
    threshold in magnitude; when everything is excluded it is reported as
    NaN, never as zero.
    """

    mae: float
    rmse: float
    mape: float
    per_step: list[StepMetrics] = field(default_factory=list)
    sample_count: int = 0
    masked_count: int = 0

    def to_text(self) -> str:
        lines = [f"{'step':>4}  {'MAE':>10}  {'RMSE':>10}  {'MAPE %':>10}"]
        for i, s in enumerate(self.per_step, start=1):
            lines.append(f"{i:>4}  {s.mae:>10.4f}  {s.rmse:>10.4f}  {_fmt_mape(s.mape):>10}")
        lines.append(f"{'avg':>4}  {self.mae:>10.4f}  {self.rmse:>10.4f}  {_fmt_mape(self.mape):>10}")
        lines.append(f"entries: {self.sample_count}, excluded from MAPE: {self.masked_count}")
        return "\n".join(lines)

    def to_json(self) -> str:
        payload = {
            "mae": self.mae,
            "rmse": self.rmse,
            "mape_percent": None if math.isnan(self.mape) else self.mape,
            "per_step": [
                {"step": i + 1, "mae": s.mae, "rmse": s.rmse,
                 "mape_percent": None if math.isnan(s.mape) else s.mape}
                for i, s in enumerate(self.per_step)
            ],
            "sample_count": self.sample_count,
            "masked_count": self.masked_count,
        }
        return json.dumps(payload, indent=2)


def _fmt_mape(v: float) -> str:
    return "undefined" if math.isnan(v) else f"{v:.4f}"


def _aggregate(diff: np.ndarray, truth: np.ndarray, threshold: float):
    mae = float(np.abs(diff).mean())
    rmse = float(np.sqrt((diff * diff).mean()))
    keep = np.abs(truth) > threshold
    masked = int(diff.size - keep.sum())
    if keep.any():
        mape = float((np.abs(diff[keep] / truth[keep])).mean() * 100.0)
    else:
        mape = float("nan")
    return mae, rmse, mape, masked


def evaluate(pred: np.ndarray, truth: np.ndarray, mask_threshold: float = 0.0) -> MetricsReport:
    """Compare forecasts with ground truth (both in original units).

    For (M, Q, N, C) arrays a per-horizon-step breakdown is included;
    lower-rank inputs get the aggregate only.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"evaluate: shapes differ, {pred.shape} vs {truth.shape}")
    diff = pred - truth
    mae, rmse, mape, masked = _aggregate(diff, truth, mask_threshold)
    per_step: list[StepMetrics] = []
    if pred.ndim >= 4:
        for q in range(pred.shape[1]):
            s_mae, s_rmse, s_mape, _ = _aggregate(diff[:, q], truth[:, q], mask_threshold)
            per_step.append(StepMetrics(s_mae, s_rmse, s_mape))
    return MetricsReport(mae=mae, rmse=rmse, mape=mape, per_step=per_step,
                         sample_count=int(diff.size), masked_count=masked)


def historical_average(inputs_original: np.ndarray, horizon: int) -> np.ndarray:
    """Baseline: every future step is the mean of the window's past values.

    inputs_original is (M, P, N, C) in original units; the result is
    (M, Q, N, C).
    """
    inputs_original = np.asarray(inputs_original, dtype=np.float64)
    if inputs_original.ndim != 4:
        raise ValueError(f"historical_average expects (M, P, N, C), got {inputs_original.shape}")
    mean = inputs_original.mean(axis=1, keepdims=True)
    return np.repeat(mean, horizon, axis=1)
