import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stella.metrics import (MetricError, MetricReport, acf, forecast_report, m4_average,
                            m4_report, mae, mape, mase, mase_scale, mse, naive2, owa,
                            seasonal_indices, seasonality_test, smape)


# brute-force loop oracles
def loop_mse(y, f):
    return sum((a - b) ** 2 for a, b in zip(y, f)) / len(y)


def loop_mae(y, f):
    return sum(abs(a - b) for a, b in zip(y, f)) / len(y)


def loop_smape(y, f):
    tot = 0.0
    for a, b in zip(y, f):
        d = abs(a) + abs(b)
        tot += 0.0 if d == 0 else abs(a - b) / d
    return 200.0 * tot / len(y)


def loop_mape(y, f):
    terms = [abs(a - b) / abs(a) for a, b in zip(y, f) if a != 0]
    return 100.0 * sum(terms) / len(terms)


def loop_mase(y, f, h, s):
    scale = sum(abs(h[t] - h[t - s]) for t in range(s, len(h))) / (len(h) - s)
    return loop_mae(y, f) / scale


def test_oracles_on_100_instances(rng):
    for _ in range(100):
        n = int(rng.integers(1, 40))
        y, f = rng.normal(size=n) * 5, rng.normal(size=n) * 5
        h, s = rng.normal(size=60).cumsum(), int(rng.integers(1, 13))
        assert abs(mse(y, f) - loop_mse(y, f)) <= 1e-9
        assert abs(mae(y, f) - loop_mae(y, f)) <= 1e-9
        assert abs(smape(y, f) - loop_smape(y, f)) <= 1e-9
        assert abs(mape(y, f)[0] - loop_mape(y, f)) <= 1e-9 * max(1.0, loop_mape(y, f))
        assert abs(mase(y, f, h, s) - loop_mase(y, f, h, s)) <= 1e-9


def test_smape_zero_over_zero():
    assert smape([0.0, 1.0], [0.0, 1.0]) == 0.0
    assert smape([0.0], [2.0]) == 200.0


def test_mape_skips_zero_targets():
    value, skipped = mape([0.0, 2.0], [1.0, 1.0])
    assert skipped == 1 and value == 50.0
    v, s = mape([0.0], [1.0])
    assert math.isnan(v) and s == 1


def test_mase_errors():
    with pytest.raises(MetricError):
        mase_scale(np.ones(3), 3)
    with pytest.raises(MetricError):
        mase([1.0], [2.0], np.ones(10), 1)


def test_owa_of_naive2_against_itself_is_one(rng):
    h = 10 + rng.normal(size=50).cumsum() ** 2 * 0 + np.abs(rng.normal(size=50)) + 5
    f = naive2(h, 8, 4)
    y = rng.normal(size=8) + 10
    s2, m2 = smape(y, f), mase(y, f, h, 4)
    assert owa(s2, m2, s2, m2) == 1.0
    rep = m4_report([h], [y], [f], 4)
    assert rep.metrics["OWA"] == 1.0


def test_owa_rejects_nonpositive_reference():
    with pytest.raises(MetricError):
        owa(1.0, 1.0, 0.0, 1.0)


@given(st.floats(0.01, 100), st.floats(0.01, 100), st.floats(0.01, 100), st.floats(0.01, 100))
def test_owa_formula(a, b, c, d):
    assert owa(a, b, c, d) == pytest.approx(0.5 * (a / c + b / d), rel=1e-12)


@given(st.integers(0, 2**31), st.integers(1, 30))
def test_metrics_nonnegative_and_zero_on_perfect(seed, n):
    r = np.random.default_rng(seed)
    y, f = r.normal(size=n), r.normal(size=n)
    assert mse(y, f) >= 0 and mae(y, f) >= 0 and 0 <= smape(y, f) <= 200
    assert mse(y, y) == mae(y, y) == smape(y, y) == 0


def test_acf_against_definition(rng):
    x = rng.normal(size=30)
    m = x.mean()
    for k in (1, 4, 9):
        ref = sum((x[t] - m) * (x[t + k] - m) for t in range(30 - k)) / sum((v - m) ** 2 for v in x)
        assert abs(acf(x, k) - ref) < 1e-12


def test_seasonality_test_detects_period():
    t = np.arange(48)
    assert seasonality_test(10 + np.sin(2 * np.pi * t / 12), 12)
    assert not seasonality_test(10 + np.random.default_rng(0).normal(size=48), 12)
    assert not seasonality_test(np.arange(10.0), 1)


def test_seasonal_indices_recover_multiplicative_pattern():
    pattern = np.array([0.8, 1.0, 1.2, 1.0])
    x = 50.0 * np.tile(pattern, 10)
    idx = seasonal_indices(x, 4)
    np.testing.assert_allclose(idx, pattern / pattern.mean(), atol=1e-12)


def test_naive2_seasonal_and_flat():
    pattern = np.array([0.8, 1.0, 1.2, 1.0])
    x = 50.0 * np.tile(pattern, 10)
    np.testing.assert_allclose(naive2(x, 6, 4), 50.0 * np.tile(pattern, 2)[:6], atol=1e-9)
    np.testing.assert_array_equal(naive2(np.array([1.0, 2.0, 5.0]), 3, 1), [5.0, 5.0, 5.0])
    with pytest.raises(MetricError):
        naive2(np.array([]), 2, 1)


def test_forecast_report_per_horizon(rng):
    y, f = rng.normal(size=(3, 5, 2)), rng.normal(size=(3, 5, 2))
    rep = forecast_report(y, f, {"split": "test"})
    assert len(rep.per_horizon["MSE"]) == 5
    assert abs(np.mean(rep.per_horizon["MSE"]) - rep.metrics["MSE"]) < 1e-12
    back = MetricReport.from_dict(rep.to_dict())
    assert back.metrics == rep.metrics and back.meta == {"split": "test"}


def test_report_json_nan_becomes_null():
    rep = MetricReport({"MAPE": float("nan"), "MSE": 1.0})
    assert '"MAPE": null' in rep.to_json()


def test_m4_average_weights_by_series(rng):
    a = MetricReport({"SMAPE": 10.0, "MASE": 1.0, "SMAPE_naive2": 20.0, "MASE_naive2": 2.0},
                     meta={"n_series": 1})
    b = MetricReport({"SMAPE": 30.0, "MASE": 3.0, "SMAPE_naive2": 20.0, "MASE_naive2": 2.0},
                     meta={"n_series": 3})
    avg = m4_average({"a": a, "b": b})
    assert avg.metrics["SMAPE"] == pytest.approx(25.0)
    assert avg.metrics["OWA"] == pytest.approx(0.5 * (25 / 20 + 2.5 / 2))
