"""
Masked-window baseline forecaster.

Piecewise-linear trend with L1-penalised slope changes plus weekly and yearly
Fourier seasonality, fit by least squares on the days outside every cyclone
mask of a port. The 95% band is yhat +/- z * sd(unmasked residuals).
"""
from __future__ import annotations

import datetime as dt
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import norm
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import Lasso

from ais_ingest import DailySeries
from config import BaselineConfig
from exposure import ExposureWindow
from shared import log_event, parallel_map

EPOCH = dt.date(1970, 1, 1)
FORECAST_COLUMNS = ["port_id", "date", "count", "yhat", "lower", "upper", "masked"]


@dataclass(frozen=True)
class MaskSpec:
    start_date: dt.date
    end_date: dt.date
    pad_before: int = 10
    pad_after: int = 10

    @property
    def interval(self) -> Tuple[dt.date, dt.date]:
        return (self.start_date - dt.timedelta(days=self.pad_before),
                self.end_date + dt.timedelta(days=self.pad_after))

    @classmethod
    def from_exposure(cls, window: ExposureWindow, pad_before: int = 10, pad_after: int = 10) -> "MaskSpec":
        return cls(window.start_date, window.end_date, pad_before, pad_after)


def masks_for_port(windows: Sequence[ExposureWindow], port_id: int,
                   pad_before: int = 10, pad_after: int = 10) -> List[MaskSpec]:
    return [MaskSpec.from_exposure(w, pad_before, pad_after) for w in windows if w.port_id == port_id]


@dataclass(frozen=True)
class Forecast:
    dates: pd.DatetimeIndex
    yhat: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


@dataclass(frozen=True)
class FittedForecaster:
    port_id: int
    start_date: dt.date
    t_scale: float
    y_scale: float
    changepoints: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray
    sigma: float
    z: float
    weekly_order: int
    yearly_order: int
    penalty: float
    n_train: int
    degenerate: bool = False
    flagged: bool = False
    upper_q95: float = 0.0
    cv_errors: Dict[float, float] = field(default_factory=dict)


def fourier_series(epoch_days: np.ndarray, period: float, order: int) -> np.ndarray:
    x = 2 * np.pi * np.asarray(epoch_days, dtype=float)
    out = np.empty((len(x), 2 * order))
    for i in range(order):
        c = x * (i + 1) / period
        out[:, 2 * i] = np.sin(c)
        out[:, 2 * i + 1] = np.cos(c)
    return out


def _design(day_idx: np.ndarray, start_date: dt.date, t_scale: float, changepoints: np.ndarray,
            weekly_order: int, yearly_order: int) -> Tuple[np.ndarray, np.ndarray]:
    """Unpenalised columns U = [1, t, weekly, yearly] and hinge columns Z = (t - s_j)+."""
    day_idx = np.asarray(day_idx, dtype=float)
    t = day_idx / t_scale
    epoch_days = day_idx + (start_date - EPOCH).days
    U = np.column_stack([
        np.ones_like(t), t,
        fourier_series(epoch_days, 7.0, weekly_order),
        fourier_series(epoch_days, 365.25, yearly_order),
    ])
    Z = np.maximum(t[:, None] - changepoints[None, :], 0.0)
    return U, Z


def _solve(U: np.ndarray, Z: np.ndarray, y: np.ndarray, penalty: float) -> Tuple[np.ndarray, np.ndarray]:
    if Z.shape[1] == 0 or penalty <= 0:
        coef = np.linalg.lstsq(np.hstack([U, Z]), y, rcond=None)[0]
        return coef[:U.shape[1]], coef[U.shape[1]:]
    # project out the unpenalised block, then L1 on the slope changes only
    y_t = y - U @ np.linalg.lstsq(U, y, rcond=None)[0]
    Z_t = Z - U @ np.linalg.lstsq(U, Z, rcond=None)[0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        lasso = Lasso(alpha=penalty, fit_intercept=False, max_iter=20000, tol=1e-6)
        lasso.fit(Z_t, y_t)
    delta = lasso.coef_.copy()
    gamma = np.linalg.lstsq(U, y - Z @ delta, rcond=None)[0]
    return gamma, delta


def _choose_penalty(U, Z, y, grid: Sequence[float], folds: int) -> Tuple[float, Dict[float, float]]:
    """Blocked k-fold CV over contiguous chunks of the training days."""
    grid = sorted(set(float(g) for g in grid))
    if len(grid) == 1 or len(y) < 2 * folds or Z.shape[1] == 0:
        return grid[0], {}
    blocks = np.array_split(np.arange(len(y)), folds)
    errors = {}
    for lam in grid:
        sse = 0.0
        for held in blocks:
            keep = np.ones(len(y), dtype=bool)
            keep[held] = False
            g, d = _solve(U[keep], Z[keep], y[keep], lam)
            sse += float(np.sum((y[held] - U[held] @ g - Z[held] @ d) ** 2))
        errors[lam] = sse / len(y)
    best = min(errors.values())
    # ties go to the heavier penalty
    return max(lam for lam, e in errors.items() if e <= best * (1 + 1e-12)), errors


def unmasked_indices(series: DailySeries, masks: Sequence[MaskSpec]) -> np.ndarray:
    keep = np.ones(len(series.counts), dtype=bool)
    for m in masks:
        lo, hi = m.interval
        a = max(series.index_of(lo), 0)
        b = min(series.index_of(hi), len(keep) - 1)
        if b >= a:
            keep[a:b + 1] = False
    return np.flatnonzero(keep)


def fit_forecaster(series: DailySeries, masks: Sequence[MaskSpec],
                   config: Optional[BaselineConfig] = None) -> FittedForecaster:
    cfg = config or BaselineConfig()
    train = unmasked_indices(series, masks)
    z = float(norm.ppf(0.5 + cfg.ci_level / 2))
    t_scale = float(max(len(series.counts) - 1, 1))
    flagged = len(train) < cfg.min_history_days
    if flagged:
        log_event("history_flag",
                  f"port {series.port_id}: {len(train)} unmasked days (< {cfg.min_history_days})", "baseline")

    y = series.counts[train].astype(float)
    if len(train) == 0 or not np.any(y):
        log_event("degenerate_warning", f"port {series.port_id}: all-zero training series", "baseline")
        return FittedForecaster(series.port_id, series.start_date, t_scale, 1.0, np.zeros(0),
                                np.zeros(2 + 2 * (cfg.fourier_weekly_order + cfg.fourier_yearly_order)),
                                np.zeros(0), 0.0, z, cfg.fourier_weekly_order, cfg.fourier_yearly_order,
                                0.0, len(train), degenerate=True, flagged=flagged, upper_q95=0.0)

    y_scale = float(np.abs(y).max())
    hist_size = int(np.floor(len(train) * cfg.changepoint_range))
    n_cp = max(min(cfg.n_changepoints, hist_size - 1), 0)
    cp_idx = np.linspace(0, hist_size - 1, n_cp + 1).round().astype(int)[1:] if n_cp else np.zeros(0, int)
    changepoints = train[cp_idx] / t_scale

    U, Z = _design(train, series.start_date, t_scale, changepoints, cfg.fourier_weekly_order, cfg.fourier_yearly_order)
    penalty, cv_errors = _choose_penalty(U, Z, y / y_scale, cfg.penalty_grid, cfg.cv_folds)
    gamma, delta = _solve(U, Z, y / y_scale, penalty)

    resid = y - y_scale * (U @ gamma + Z @ delta)
    sigma = float(np.std(resid))
    log_event("fit", f"port {series.port_id}: n={len(train)} penalty={penalty:g} sigma={sigma:.3f}", "baseline")
    return FittedForecaster(series.port_id, series.start_date, t_scale, y_scale, changepoints, gamma, delta,
                            sigma, z, cfg.fourier_weekly_order, cfg.fourier_yearly_order, penalty, len(train),
                            flagged=flagged, cv_errors=cv_errors)


def _day_index(model: FittedForecaster, dates) -> np.ndarray:
    dates = pd.DatetimeIndex(dates).tz_localize(None).normalize()
    return np.asarray((dates - pd.Timestamp(model.start_date)).days, dtype=float)


def seasonal_components(model: FittedForecaster, dates) -> pd.DataFrame:
    idx = _day_index(model, dates)
    n = len(idx)
    if model.degenerate:
        return pd.DataFrame({"trend": np.zeros(n), "weekly": np.zeros(n), "yearly": np.zeros(n)},
                            index=pd.DatetimeIndex(dates))
    U, Z = _design(idx, model.start_date, model.t_scale, model.changepoints, model.weekly_order, model.yearly_order)
    w_end = 2 + 2 * model.weekly_order
    s = model.y_scale
    return pd.DataFrame({
        "trend": s * (U[:, :2] @ model.gamma[:2] + Z @ model.delta),
        "weekly": s * (U[:, 2:w_end] @ model.gamma[2:w_end]),
        "yearly": s * (U[:, w_end:] @ model.gamma[w_end:]),
    }, index=pd.DatetimeIndex(dates))


def trend_slope(model: FittedForecaster) -> float:
    """Average trend slope over the fitted span, in counts per day."""
    ends = pd.DatetimeIndex([pd.Timestamp(model.start_date),
                             pd.Timestamp(model.start_date) + pd.Timedelta(days=model.t_scale)])
    trend = seasonal_components(model, ends)["trend"].to_numpy()
    return float((trend[1] - trend[0]) / model.t_scale)


def predict_with_ci(model: FittedForecaster, dates) -> Forecast:
    dates = pd.DatetimeIndex(dates)
    if model.degenerate:
        zeros = np.zeros(len(dates))
        return Forecast(dates, zeros, zeros.copy(), np.full(len(dates), model.upper_q95))
    raw = seasonal_components(model, dates).sum(axis=1).to_numpy()
    half = model.z * model.sigma
    yhat = np.maximum(raw, 0.0)
    lower = np.maximum(raw - half, 0.0)
    upper = np.maximum(raw + half, yhat)
    return Forecast(dates, yhat, lower, upper)


def fit_all(series: Dict[int, DailySeries], windows: Sequence[ExposureWindow],
            config: Optional[BaselineConfig] = None, threads: Optional[int] = None) -> Dict[int, FittedForecaster]:
    """One fit per port, masking every interaction that port has."""
    cfg = config or BaselineConfig()
    pids = sorted(series)
    models = parallel_map(
        lambda pid: fit_forecaster(series[pid], masks_for_port(windows, pid, cfg.pad_before, cfg.pad_after), cfg),
        pids, threads)
    return dict(zip(pids, models))


def forecast_frame(models: Dict[int, FittedForecaster], series: Dict[int, DailySeries],
                   windows: Sequence[ExposureWindow], config: Optional[BaselineConfig] = None) -> pd.DataFrame:
    cfg = config or BaselineConfig()
    frames = []
    for pid in sorted(models):
        s = series[pid]
        fc = predict_with_ci(models[pid], s.dates)
        masked = np.ones(len(s.counts), dtype=int)
        masked[unmasked_indices(s, masks_for_port(windows, pid, cfg.pad_before, cfg.pad_after))] = 0
        frames.append(pd.DataFrame({
            "port_id": pid, "date": s.dates.strftime("%Y-%m-%d"), "count": s.counts,
            "yhat": fc.yhat, "lower": fc.lower, "upper": fc.upper, "masked": masked,
        }))
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=FORECAST_COLUMNS)


def model_frame(models: Dict[int, FittedForecaster]) -> pd.DataFrame:
    return pd.DataFrame([{
        "port_id": m.port_id, "n_train": m.n_train, "penalty": m.penalty, "sigma": m.sigma,
        "trend_slope": trend_slope(m), "degenerate": int(m.degenerate), "flagged": int(m.flagged),
    } for _, m in sorted(models.items())])


def read_forecasts(path: str) -> Dict[int, Tuple[DailySeries, Forecast]]:
    df = pd.read_csv(path, parse_dates=["date"])
    out = {}
    for pid, grp in df.groupby("port_id", sort=True):
        grp = grp.sort_values("date")
        dates = pd.DatetimeIndex(grp["date"])
        s = DailySeries(int(pid), dates[0].date(), grp["count"].to_numpy(np.int64))
        out[int(pid)] = (s, Forecast(dates, grp["yhat"].to_numpy(float), grp["lower"].to_numpy(float),
                                     grp["upper"].to_numpy(float)))
    return out
