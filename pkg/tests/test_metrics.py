import json
import math

import numpy as np
import pytest

from afdgcn.metrics import MetricsReport, evaluate, historical_average

from oracles import metrics_loops


def test_perfect_forecast_is_zero():
    truth = np.random.default_rng(0).standard_normal((3, 2, 2, 1)) + 5
    rep = evaluate(truth.copy(), truth)
    assert rep.mae == 0.0 and rep.rmse == 0.0 and rep.mape == 0.0


def test_hand_arithmetic_case():
    rep = evaluate(np.array([0.0, 2.0]), np.array([1.0, 3.0]))
    assert rep.mae == pytest.approx(1.0)
    assert rep.rmse == pytest.approx(1.0)
    assert rep.mape == pytest.approx(100.0 * (1.0 + 1.0 / 3.0) / 2.0)


def test_zero_truth_masked_not_counted():
    rep = evaluate(np.array([1.0, 2.0]), np.array([0.0, 4.0]), mask_threshold=0.0)
    assert rep.masked_count == 1
    assert rep.mape == pytest.approx(50.0)


def test_all_masked_reports_nan_sentinel():
    rep = evaluate(np.array([1.0, 2.0]), np.array([0.0, 0.0]))
    assert math.isnan(rep.mape)
    assert rep.masked_count == 2
    payload = json.loads(rep.to_json())
    assert payload["mape_percent"] is None
    assert "undefined" in rep.to_text()


def test_matches_scalar_loop_oracle():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        pred = rng.standard_normal((4, 3, 2, 1)) * 10
        truth = rng.standard_normal((4, 3, 2, 1)) * 10
        rep = evaluate(pred, truth, mask_threshold=0.5)
        mae, rmse, mape, masked = metrics_loops(pred, truth, threshold=0.5)
        assert rep.mae == pytest.approx(mae, abs=1e-12)
        assert rep.rmse == pytest.approx(rmse, abs=1e-12)
        assert rep.mape == pytest.approx(mape, abs=1e-9)
        assert rep.masked_count == masked


def test_rmse_dominates_mae():
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        pred = rng.standard_normal((5, 4, 3, 1))
        truth = rng.standard_normal((5, 4, 3, 1))
        rep = evaluate(pred, truth)
        assert rep.rmse >= rep.mae >= 0.0
        for s in rep.per_step:
            assert s.rmse >= s.mae >= 0.0


def test_per_step_breakdown():
    rng = np.random.default_rng(2)
    pred = rng.standard_normal((6, 4, 2, 1))
    truth = rng.standard_normal((6, 4, 2, 1))
    rep = evaluate(pred, truth)
    assert len(rep.per_step) == 4
    for q in range(4):
        sub = evaluate(pred[:, q], truth[:, q])
        assert rep.per_step[q].mae == pytest.approx(sub.mae)
        assert rep.per_step[q].rmse == pytest.approx(sub.rmse)


def test_report_text_row_count():
    rng = np.random.default_rng(3)
    pred = rng.standard_normal((5, 12, 2, 1))
    rep = evaluate(pred, pred * 1.1)
    lines = rep.to_text().splitlines()
    assert len(lines) == 1 + 12 + 1 + 1  # header, 12 steps, average, counts


def test_shape_mismatch():
    with pytest.raises(ValueError):
        evaluate(np.zeros(3), np.zeros(4))


def test_historical_average_repeats_window_mean():
    rng = np.random.default_rng(4)
    inputs = rng.standard_normal((5, 8, 3, 1)) + 10
    pred = historical_average(inputs, horizon=6)
    assert pred.shape == (5, 6, 3, 1)
    expected = inputs.mean(axis=1)
    for q in range(6):
        np.testing.assert_allclose(pred[:, q], expected, atol=1e-12)


def test_historical_average_constant_series_is_exact():
    inputs = np.full((3, 4, 2, 1), 7.0)
    pred = historical_average(inputs, horizon=2)
    rep = evaluate(pred, np.full((3, 2, 2, 1), 7.0))
    assert rep.mae == 0.0
