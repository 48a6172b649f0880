"""
Impact windows and resilience metrics.

Outlier days are days whose observed count falls below the forecast's lower
bound inside a storm's masked window. The run overlapping the exposure window
becomes the impact window [t_o, t_e]; the disruption ends at t_c = t_e + 1.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ais_ingest import DailySeries
from baseline import Forecast, MaskSpec
from config import BaselineConfig, ImpactConfig
from exposure import ExposureWindow
from shared import log_event, parallel_map

RECORD_COLUMNS = [
    "ID", "SID", "PID", "start_date", "end_date", "start_recovery_date", "end_recovery_date",
    "total_impact", "total_impact_value", "max_impact", "day_of_recover",
]
CURVE_COLUMNS = ["PID", "SID", "date", "count", "yhat", "lower", "upper", "phase"]


@dataclass(frozen=True)
class OutlierPeriod:
    start: dt.date
    end: dt.date

    @property
    def days(self) -> int:
        return (self.end - self.start).days + 1


@dataclass(frozen=True)
class ResilienceRecord:
    port_id: int
    storm_id: str
    t_o: Optional[dt.date] = None
    t_s: Optional[dt.date] = None
    t_e: Optional[dt.date] = None
    t_c: Optional[dt.date] = None
    total_impact: float = 0.0
    total_impact_value: float = 0.0
    max_impact: Optional[float] = None
    recovery_duration: int = 0
    flagged: bool = False

    @property
    def has_impact(self) -> bool:
        return self.t_o is not None


def detect_outliers(series: DailySeries, forecast: Forecast, gap_merge: int = 2,
                    span: Optional[Tuple[dt.date, dt.date]] = None) -> List[OutlierPeriod]:
    """Maximal runs of c(t) < lower(t); runs separated by <= gap_merge normal days are merged."""
    below = series.counts < forecast.lower
    lo, hi = 0, len(below) - 1
    if span is not None:
        lo = max(series.index_of(span[0]), 0)
        hi = min(series.index_of(span[1]), hi)
    runs: List[List[int]] = []
    for i in range(lo, hi + 1):
        if not below[i]:
            continue
        if runs and i - runs[-1][1] - 1 <= gap_merge:
            runs[-1][1] = i
        else:
            runs.append([i, i])
    day = lambda i: series.start_date + dt.timedelta(days=i)
    return [OutlierPeriod(day(a), day(b)) for a, b in runs]


def attribute_window(outliers: Sequence[OutlierPeriod], exposure: ExposureWindow) -> Optional[OutlierPeriod]:
    best, best_overlap = None, 0
    for p in sorted(outliers, key=lambda p: p.start):
        overlap = (min(p.end, exposure.end_date) - max(p.start, exposure.start_date)).days + 1
        if overlap > best_overlap:
            best, best_overlap = p, overlap
    return best


def locate_recovery_start(series: DailySeries, window: OutlierPeriod) -> dt.date:
    """Walk back from t_e while every daily difference up to t_e + 1 stays positive."""
    c = series.counts
    o, e = series.index_of(window.start), series.index_of(window.end)
    if e + 1 >= len(c) or c[e + 1] - c[e] <= 0:
        return window.end
    s = e
    while s - 1 >= o and c[s] - c[s - 1] > 0:
        s -= 1
    return series.start_date + dt.timedelta(days=s)


def total_impact(series: DailySeries, forecast: Forecast, window: OutlierPeriod,
                 clamp_nonnegative: bool = False) -> Tuple[float, float, float, bool]:
    """(A, total_impact_value, max_impact, flagged), summed over t_o .. t_c inclusive."""
    o = series.index_of(window.start)
    c_idx = series.index_of(window.end) + 1
    flagged = c_idx >= len(series.counts)
    idx = np.arange(o, min(c_idx, len(series.counts) - 1) + 1)

    count = series.counts[idx].astype(float)
    lower = forecast.lower[idx]
    nonpositive = lower <= 0
    if nonpositive.any():
        flagged = True
        log_event("lower_bound_flag",
                  f"port {series.port_id}: {int(nonpositive.sum())} day(s) with lower <= 0, using 1 vessel",
                  "impact")
    norm_terms = 1.0 - count / np.where(nonpositive, 1.0, lower)
    value_terms = lower - count
    if clamp_nonnegative:
        norm_terms = np.maximum(norm_terms, 0.0)
        value_terms = np.maximum(value_terms, 0.0)
    return float(norm_terms.sum()), float(value_terms.sum()), float(norm_terms.max()), flagged


def recovery_duration(t_s: Optional[dt.date], t_c: Optional[dt.date]) -> int:
    if t_s is None or t_c is None:
        return 0
    return (t_c - t_s).days


def evaluate_interaction(series: DailySeries, forecast: Forecast, exposure: ExposureWindow,
                         config: Optional[ImpactConfig] = None,
                         pads: Tuple[int, int] = (10, 10)) -> ResilienceRecord:
    cfg = config or ImpactConfig()
    mask = MaskSpec.from_exposure(exposure, *pads)
    outliers = detect_outliers(series, forecast, cfg.gap_merge, mask.interval)
    window = attribute_window(outliers, exposure)
    if window is None:
        return ResilienceRecord(exposure.port_id, exposure.storm_id)

    t_s = locate_recovery_start(series, window)
    t_c = window.end + dt.timedelta(days=1)
    area, value, peak, flagged = total_impact(series, forecast, window, cfg.clamp_nonnegative)
    return ResilienceRecord(exposure.port_id, exposure.storm_id, window.start, t_s, window.end, t_c,
                            area, value, peak, recovery_duration(t_s, t_c), flagged)


def evaluate_all(forecasts: Dict[int, Tuple[DailySeries, Forecast]], windows: Sequence[ExposureWindow],
                 config: Optional[ImpactConfig] = None, baseline: Optional[BaselineConfig] = None,
                 threads: Optional[int] = None) -> List[ResilienceRecord]:
    cfg = config or ImpactConfig()
    bcfg = baseline or BaselineConfig()
    known = [w for w in windows if w.port_id in forecasts]
    records = parallel_map(
        lambda w: evaluate_interaction(*forecasts[w.port_id], w, cfg, (bcfg.pad_before, bcfg.pad_after)),
        known, threads)
    hits = sum(r.has_impact for r in records)
    log_event("detect", f"{hits}/{len(records)} interactions with an impact window", "impact")
    return sorted(records, key=lambda r: (r.storm_id, r.port_id))


def filter_low_traffic(records: Sequence[ResilienceRecord], port_means: Dict[int, float],
                       threshold: float = 5.0) -> List[ResilienceRecord]:
    kept = [r for r in records if port_means.get(r.port_id, 0.0) >= threshold]
    log_event("traffic_filter", f"kept {len(kept)} of {len(records)} records (mean >= {threshold:g})", "impact")
    return kept


def resilience_curve_rows(series: DailySeries, forecast: Forecast, record: ResilienceRecord,
                          span: Tuple[dt.date, dt.date]) -> pd.DataFrame:
    """Plot-ready curve over `span`, each day tagged normal / disruption / recovery."""
    lo = max(series.index_of(span[0]), 0)
    hi = min(series.index_of(span[1]), len(series.counts) - 1)
    rows = []
    for i in range(lo, hi + 1):
        day = series.start_date + dt.timedelta(days=i)
        phase = "normal"
        if record.has_impact and record.t_o <= day < record.t_s:
            phase = "disruption"
        elif record.has_impact and record.t_s <= day <= record.t_e:
            phase = "recovery"
        rows.append((record.port_id, record.storm_id, day.isoformat(), int(series.counts[i]),
                     forecast.yhat[i], forecast.lower[i], forecast.upper[i], phase))
    return pd.DataFrame(rows, columns=CURVE_COLUMNS)


def records_frame(records: Sequence[ResilienceRecord]) -> pd.DataFrame:
    iso = lambda d: d.isoformat() if d is not None else None
    rows = [{
        "ID": i + 1, "SID": r.storm_id, "PID": r.port_id,
        "start_date": iso(r.t_o), "end_date": iso(r.t_e),
        "start_recovery_date": iso(r.t_s), "end_recovery_date": iso(r.t_c),
        "total_impact": r.total_impact, "total_impact_value": r.total_impact_value,
        "max_impact": r.max_impact, "day_of_recover": r.recovery_duration,
    } for i, r in enumerate(records)]
    return pd.DataFrame(rows, columns=RECORD_COLUMNS)


def read_records(path: str) -> List[ResilienceRecord]:
    df = pd.read_csv(path, dtype={"SID": str})
    day = lambda v: dt.date.fromisoformat(v) if isinstance(v, str) else None
    return [ResilienceRecord(
        int(r.PID), r.SID, day(r.start_date), day(r.start_recovery_date), day(r.end_date), day(r.end_recovery_date),
        float(r.total_impact), float(r.total_impact_value),
        None if pd.isna(r.max_impact) else float(r.max_impact), int(r.day_of_recover),
    ) for r in df.itertuples(index=False)]
