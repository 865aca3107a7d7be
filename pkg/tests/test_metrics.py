import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dost.metrics import (
    MetricReport,
    PredictionLedger,
    ScoredPair,
    mae,
    rescore_ledger,
    rmse,
    score_lazily,
    wmape,
)


def test_hand_example():
    assert mae([1, 2], [1, 4]) == 1.0
    assert rmse([1, 2], [1, 4]) == pytest.approx(math.sqrt(2), abs=1e-12)
    assert wmape([1, 2], [1, 4]) == pytest.approx(0.4, abs=1e-15)


def test_perfect_forecast_and_offset():
    y = np.random.default_rng(0).normal(size=(5, 3))
    assert mae(y, y) == rmse(y, y) == wmape(y, y) == 0.0
    assert mae(np.full(4, 2.5), np.zeros(4)) == 2.5
    assert mae(np.zeros((2, 3)) + 0.25, np.zeros((2, 3))) == 0.25


def test_wmape_all_zero_truth_is_absent():
    assert wmape([1.0, 2.0], [0.0, 0.0]) is None


def test_shape_mismatch():
    with pytest.raises(ValueError):
        mae([1.0], [1.0, 2.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 100), st.floats(-50, 50))
def test_rmse_ge_mae_and_scaling(seed, a, b):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=(4, 3))
    p = rng.normal(size=(4, 3))
    assert rmse(p, y) >= mae(p, y) - 1e-15
    # affine normalisation round trip in original units leaves MAE/RMSE alone
    back_p = ((a * p + b) - b) / a
    back_y = ((a * y + b) - b) / a
    assert mae(back_p, back_y) == pytest.approx(mae(p, y), rel=1e-9, abs=1e-12)
    # pure scaling leaves WMAPE alone, shifting does not in general
    assert wmape(a * p, a * y) == pytest.approx(wmape(p, y), rel=1e-9)


def _stream(T=30, N=3, H=2, seed=0):
    rng = np.random.default_rng(seed)
    rows = rng.normal(size=(T, N, 1))
    preds = rng.normal(size=(T, N, H, 1))
    return rows, preds


def test_horizon_arithmetic():
    H = 2
    led = PredictionLedger(H)
    rows, preds = _stream(H=H)
    led.observe(0, rows[0])
    led.issue(0, preds[0], "awake")
    assert led.observe(1, rows[1]) == []
    (pair,) = score_lazily(led, 2, rows[2])
    assert pair.step == 0
    np.testing.assert_array_equal(pair.truth[:, :, 0], rows[1:3, :, 0].T)


def test_truncated_stream_counts_unresolved():
    H = 3
    led = PredictionLedger(H)
    rows, preds = _stream(T=10, H=H)
    for t in range(10):
        led.observe(t, rows[t])
        led.issue(t, preds[t], "awake")
    rep = led.close()
    assert rep.unresolved == H
    assert rep.n_pairs == 10 - H
    assert rep.overall()["count"] == (10 - H) * 3 * H


def test_out_of_order_truth_rejected():
    led = PredictionLedger(2)
    led.observe(0, np.zeros((1, 1)))
    with pytest.raises(ValueError):
        led.observe(2, np.zeros((1, 1)))


def _run_ledger(seed):
    H = 3
    led = PredictionLedger(H)
    rows, preds = _stream(T=60, H=H, seed=seed)
    for t in range(60):
        led.observe(t, rows[t])
        led.issue(t, preds[t], "awake" if (t // 7) % 2 == 0 else "hibernate")
    led.close()
    return led


def test_online_equals_offline_recompute(tmp_path):
    led = _run_ledger(1)
    offline = MetricReport.from_pairs(led.resolved, led.horizon, led.report.unresolved)
    assert offline.summary() == led.report.summary()
    assert offline.rows == led.report.rows

    led.save(tmp_path / "ledger.npz")
    back = rescore_ledger(tmp_path / "ledger.npz")
    assert back.summary() == led.report.summary()
    assert back.unresolved == led.report.unresolved

    led.report.write(tmp_path / "a.csv")
    back.write(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_offline_recompute_is_order_independent():
    led = _run_ledger(2)
    shuffled = list(reversed(led.resolved))
    assert MetricReport.from_pairs(shuffled, led.horizon).overall() == led.report.overall()


def test_report_matches_direct_metrics():
    led = _run_ledger(3)
    preds = np.stack([p.pred for p in led.resolved])
    truths = np.stack([p.truth for p in led.resolved])
    ov = led.report.overall()
    assert ov["mae"] == pytest.approx(mae(preds, truths), rel=1e-13)
    assert ov["rmse"] == pytest.approx(rmse(preds, truths), rel=1e-13)
    assert ov["wmape"] == pytest.approx(wmape(preds, truths), rel=1e-13)
    h1 = led.report.summary()[("all", "1")]
    assert h1["mae"] == pytest.approx(mae(preds[:, :, 0], truths[:, :, 0]), rel=1e-13)
    awake = [p for p in led.resolved if p.phase == "awake"]
    assert led.report.summary()[("awake", "all")]["count"] == sum(p.pred.size for p in awake)
    for m in led.report.summary().values():
        assert m["rmse"] >= m["mae"] and m["wmape"] >= 0


def test_report_file_layout(tmp_path):
    rep = MetricReport.from_pairs(
        [ScoredPair(5, "awake", np.ones((2, 2, 1)), np.full((2, 2, 1), 3.0))], horizon=2, unresolved=1
    )
    rep.write(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "step,phase,horizon,mae,rmse,wmape"
    assert lines[1].startswith("5,awake,1,2,2,")
    assert "# summary" in lines and lines[-1] == "unresolved,1"
    assert "resolved predictions: 1, unresolved: 1" in rep.format_summary()
