"""Point forecast metrics, MASE, OWA and the M4 Naive2 reference forecaster."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

SEASONALITY_Z = 1.645  # 90% one-sided level used by the M4 seasonality test


class MetricError(ValueError):
    pass


def mse(y: np.ndarray, yhat: np.ndarray) -> float:
    return float(np.mean((np.asarray(y) - np.asarray(yhat)) ** 2))


def mae(y: np.ndarray, yhat: np.ndarray) -> float:
    return float(np.mean(np.abs(np.asarray(y) - np.asarray(yhat))))


def smape(y: np.ndarray, yhat: np.ndarray) -> float:
    """``200 * mean(|y - yhat| / (|y| + |yhat|))``; 0/0 terms count as 0."""
    y, yhat = np.asarray(y, dtype=np.float64), np.asarray(yhat, dtype=np.float64)
    num = np.abs(y - yhat)
    den = np.abs(y) + np.abs(yhat)
    ratio = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(200.0 * np.mean(ratio))


def mape(y: np.ndarray, yhat: np.ndarray) -> tuple[float, int]:
    """Return ``(MAPE, n_skipped)``; terms with ``y == 0`` are left out of the mean."""
    y, yhat = np.asarray(y, dtype=np.float64), np.asarray(yhat, dtype=np.float64)
    valid = y != 0
    skipped = int(valid.size - valid.sum())
    if not valid.any():
        return float("nan"), skipped
    return float(100.0 * np.mean(np.abs(y[valid] - yhat[valid]) / np.abs(y[valid]))), skipped


def point_metrics(y: np.ndarray, yhat: np.ndarray) -> dict[str, float]:
    y, yhat = np.asarray(y), np.asarray(yhat)
    if y.shape != yhat.shape:
        raise MetricError(f"shape mismatch {y.shape} vs {yhat.shape}")
    mape_value, skipped = mape(y, yhat)
    return {"MSE": mse(y, yhat), "MAE": mae(y, yhat), "SMAPE": smape(y, yhat),
            "MAPE": mape_value, "MAPE_skipped": skipped}


def mase_scale(insample: np.ndarray, s: int) -> float:
    """Mean absolute seasonal-naive error over the history."""
    insample = np.asarray(insample, dtype=np.float64)
    if insample.size <= s:
        raise MetricError(f"history of length {insample.size} too short for seasonality {s}")
    return float(np.mean(np.abs(insample[s:] - insample[:-s])))


def mase(y: np.ndarray, yhat: np.ndarray, insample: np.ndarray, s: int) -> float:
    scale = mase_scale(insample, s)
    if scale == 0:
        raise MetricError("MASE undefined: seasonal-naive in-sample error is zero")
    return mae(y, yhat) / scale


def owa(smape_value: float, mase_value: float, smape_naive2: float, mase_naive2: float) -> float:
    if smape_naive2 <= 0 or mase_naive2 <= 0:
        raise MetricError("OWA needs positive Naive2 reference values")
    return 0.5 * (smape_value / smape_naive2 + mase_value / mase_naive2)


# ---------------------------------------------------------------------------
# Naive2
# ---------------------------------------------------------------------------


def acf(x: np.ndarray, k: int) -> float:
    x = np.asarray(x, dtype=np.float64)
    m = x.mean()
    den = np.sum((x - m) ** 2)
    if den == 0:
        return 0.0
    return float(np.sum((x[:-k] - m) * (x[k:] - m)) / den)


def seasonality_test(history: np.ndarray, s: int) -> bool:
    """``|acf(s)| > 1.645 * sqrt((1 + 2 * sum_{i<s} acf(i)^2) / n)``."""
    if s <= 1:
        return False
    rho2 = sum(acf(history, i) ** 2 for i in range(1, s))
    limit = SEASONALITY_Z * math.sqrt((1 + 2 * rho2) / len(history))
    return abs(acf(history, s)) > limit


def seasonal_indices(history: np.ndarray, s: int) -> np.ndarray:
    """Multiplicative seasonal indices from a classical decomposition.

    Ratios to a centered moving average (2 x s for even ``s``) are averaged per
    season position and normalized to mean 1. Index ``j`` belongs to time
    steps ``t`` with ``t % s == j``.
    """
    x = np.asarray(history, dtype=np.float64)
    n = x.size
    if s % 2 == 0:
        w = np.r_[0.5, np.ones(s - 1), 0.5] / s
    else:
        w = np.ones(s) / s
    half = (len(w) - 1) // 2
    trend = np.full(n, np.nan)
    trend[half:n - half] = np.convolve(x, w, mode="valid")
    ratio = x / trend
    idx = np.array([np.nanmean(ratio[j::s]) for j in range(s)])
    return idx / idx.mean()


def naive2(history: np.ndarray, horizon: int, s: int) -> np.ndarray:
    """M4 Naive2: seasonally adjusted last value when the seasonality test passes."""
    x = np.asarray(history, dtype=np.float64)
    if x.size == 0:
        raise MetricError("naive2 needs a non-empty history")
    if s > 1 and x.size >= 2 * s and seasonality_test(x, s):
        idx = seasonal_indices(x, s)
        n = x.size
        level = x[-1] / idx[(n - 1) % s]
        return level * idx[(n + np.arange(horizon)) % s]
    return np.full(horizon, x[-1])


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    metrics: dict[str, float]
    per_horizon: dict[str, list[float]] = field(default_factory=dict)
    seasonality: int | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"metrics": {k: _clean(v) for k, v in self.metrics.items()}}
        if self.per_horizon:
            out["per_horizon"] = {k: [_clean(v) for v in vs] for k, vs in self.per_horizon.items()}
        if self.seasonality is not None:
            out["seasonality"] = self.seasonality
        if self.meta:
            out["meta"] = self.meta
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(d["metrics"], d.get("per_horizon", {}), d.get("seasonality"), d.get("meta", {}))


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def forecast_report(y: np.ndarray, yhat: np.ndarray, meta: dict | None = None) -> MetricReport:
    """Aggregate and per-horizon-step MSE/MAE for B x H x C arrays."""
    y, yhat = np.asarray(y), np.asarray(yhat)
    pm = point_metrics(y, yhat)
    err = yhat - y
    per_h = {"MSE": np.mean(err ** 2, axis=(0, 2)).tolist(),
             "MAE": np.mean(np.abs(err), axis=(0, 2)).tolist()}
    return MetricReport(pm, per_h, None, meta or {})


def m4_report(
    histories: list[np.ndarray],
    targets: list[np.ndarray],
    forecasts: list[np.ndarray],
    s: int,
) -> MetricReport:
    """SMAPE/MASE averaged over series, with OWA against Naive2 on the same series."""
    sm, ms, sm2, ms2 = [], [], [], []
    for h, y, f in zip(histories, targets, forecasts):
        n2 = naive2(h, len(y), s)
        sm.append(smape(y, f))
        ms.append(mase(y, f, h, s))
        sm2.append(smape(y, n2))
        ms2.append(mase(y, n2, h, s))
    values = {"SMAPE": float(np.mean(sm)), "MASE": float(np.mean(ms)),
              "SMAPE_naive2": float(np.mean(sm2)), "MASE_naive2": float(np.mean(ms2))}
    values["OWA"] = owa(values["SMAPE"], values["MASE"], values["SMAPE_naive2"],
                        values["MASE_naive2"])
    return MetricReport(values, seasonality=s, meta={"n_series": len(targets)})


def m4_average(group_reports: dict[str, MetricReport]) -> MetricReport:
    """Series-count weighted average of per-group SMAPE/MASE; OWA from the averages."""
    w = {g: r.meta["n_series"] for g, r in group_reports.items()}
    total = sum(w.values())
    agg = {}
    for key in ("SMAPE", "MASE", "SMAPE_naive2", "MASE_naive2"):
        agg[key] = sum(group_reports[g].metrics[key] * w[g] for g in w) / total
    agg["OWA"] = owa(agg["SMAPE"], agg["MASE"], agg["SMAPE_naive2"], agg["MASE_naive2"])
    return MetricReport(agg, meta={"n_series": total, "groups": list(group_reports)})
