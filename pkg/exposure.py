"""
Cyclone exposure: which ports sit inside the 500 km buffer around an eye track,
for which dates, how close the eye came, and what the nearest stations saw.
"""
from __future__ import annotations

import json
import datetime as dt
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np
import pandas as pd

from ais_ingest import PortBoundary
from shared import ValidationError, log_event, parallel_map, fmt_time, parse_time

EARTH_RADIUS_KM = 6371.0088

TRACK_COLUMNS = ["SID", "ISO_TIME", "LAT", "LON", "WMO_WIND", "WMO_PRES", "USA_SSHS"]
EXPOSURE_COLUMNS = [
    "PID", "SID", "start_date", "end_date", "DISTANCE", "SSHS", "WIND", "PRESSURE",
    "closest_time", "IF_LANDFALL", "IF_LANDFALL_CLOSE2PORT",
    "Wind_speed", "Surge_height", "Rainfall", "weather_flag",
]


@dataclass(frozen=True)
class TrackPoint:
    storm_id: str
    timestamp: pd.Timestamp
    lat: float
    lon: float
    wind: float
    pressure: float
    sshs: int


@dataclass(frozen=True)
class ExposureWindow:
    port_id: int
    storm_id: str
    start_date: dt.date
    end_date: dt.date
    min_distance_km: float
    max_sshs: int
    closest_time: Optional[pd.Timestamp] = None
    max_wind: float = float("nan")
    min_pressure: float = float("nan")
    if_landfall: Optional[bool] = None
    if_landfall_close2port: Optional[bool] = None


@dataclass(frozen=True)
class WeatherSummary:
    port_id: int
    storm_id: str
    wind_speed: Optional[float]
    surge_height: Optional[float]
    rainfall: Optional[float]
    flagged: bool = False


# === GEODESY ===
def haversine_array(lat1, lon1, lat2, lon2) -> np.ndarray:
    phi1, phi2 = np.radians(lat1), np.radians(lat2)
    dphi = phi2 - phi1
    dlmb = np.radians(np.asarray(lon2, dtype=float) - np.asarray(lon1, dtype=float))
    a = np.sin(dphi / 2) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def haversine_km(p1: Tuple[float, float], p2: Tuple[float, float]) -> float:
    """Great-circle distance in km between two (lat, lon) points in degrees."""
    for lat, lon in (p1, p2):
        if not (-90 <= lat <= 90 and -180 <= lon <= 180):
            raise ValueError(f"coordinate out of range: ({lat}, {lon})")
    return float(haversine_array(p1[0], p1[1], p2[0], p2[1]))


# === TRACKS ===
def parse_tracks(source: Union[str, TextIO]) -> Dict[str, List[TrackPoint]]:
    df = pd.read_csv(source, dtype=str, keep_default_na=False)
    missing = [c for c in TRACK_COLUMNS if c not in df.columns]
    if missing:
        raise ValidationError(f"track input is missing column(s): {', '.join(missing)}")
    ts = pd.to_datetime(df["ISO_TIME"].str.strip(), utc=True, errors="coerce", format="ISO8601")
    lat = pd.to_numeric(df["LAT"], errors="coerce")
    lon = pd.to_numeric(df["LON"], errors="coerce")
    wind = pd.to_numeric(df["WMO_WIND"], errors="coerce")
    pres = pd.to_numeric(df["WMO_PRES"], errors="coerce")
    # below -1 are non-tropical / unknown codes; fold into TD
    sshs = pd.to_numeric(df["USA_SSHS"], errors="coerce").fillna(-1).clip(-1, 5).astype(int)
    ok = ts.notna() & lat.between(-90, 90) & lon.between(-180, 180)

    tracks: Dict[str, List[TrackPoint]] = {}
    for sid, t, a, o, w, p, s in zip(df["SID"][ok], ts[ok], lat[ok], lon[ok], wind[ok], pres[ok], sshs[ok]):
        tracks.setdefault(sid.strip(), []).append(TrackPoint(sid.strip(), t, float(a), float(o), float(w), float(p), int(s)))
    for sid, pts in tracks.items():
        pts.sort(key=lambda p: p.timestamp)
        dedup = [p for i, p in enumerate(pts) if i == 0 or p.timestamp != pts[i - 1].timestamp]
        if len(dedup) != len(pts):
            log_event("track_warning", f"{sid}: dropped {len(pts) - len(dedup)} duplicate fix time(s)", "exposure")
        tracks[sid] = dedup
    return dict(sorted(tracks.items()))


def interpolate_track(points: Sequence[TrackPoint], step_hours: float = 1.0) -> pd.DataFrame:
    """Linear positions on an hourly grid plus every raw fix. Longitude is unwrapped across the antimeridian.

    Intensity columns carry the most recent raw fix forward.
    """
    fix_t = np.array([p.timestamp.value for p in points], dtype=np.int64)
    step = int(step_hours * 3600 * 1e9)
    grid = np.arange(fix_t[0] - fix_t[0] % step + step, fix_t[-1], step, dtype=np.int64) if len(points) > 1 else fix_t[:0]
    t = np.union1d(fix_t, grid)

    lon_unwrapped = np.degrees(np.unwrap(np.radians([p.lon for p in points])))
    lat = np.interp(t, fix_t, [p.lat for p in points])
    lon = np.interp(t, fix_t, lon_unwrapped)
    lon = (lon + 180.0) % 360.0 - 180.0

    prev = np.searchsorted(fix_t, t, side="right") - 1
    return pd.DataFrame({
        "timestamp": pd.to_datetime(t, utc=True),
        "lat": lat,
        "lon": lon,
        "wind": np.array([p.wind for p in points])[prev],
        "pressure": np.array([p.pressure for p in points])[prev],
        "sshs": np.array([p.sshs for p in points])[prev],
    })


def load_land_polygon(path: str) -> PortBoundary:
    """All polygons of a GeoJSON FeatureCollection merged into one land mask."""
    with open(path, "r", encoding="utf-8") as f:
        gj = json.load(f)
    polys = []
    for feat in gj.get("features", []):
        geom = feat.get("geometry") or {}
        raw = [geom["coordinates"]] if geom.get("type") == "Polygon" else geom.get("coordinates", [])
        for poly in raw:
            polys.append(tuple(tuple((float(lat), float(lon)) for lon, lat in ring) for ring in poly))
    if not polys:
        raise ValidationError(f"no land polygons in {path}")
    return PortBoundary(0, "land", "NonCoast", tuple(polys))


def _storm_positions(sid: str, points: Sequence[TrackPoint], step_hours: float) -> pd.DataFrame:
    if len(points) < 2:
        log_event("track_warning", f"{sid}: fewer than 2 fixes, distances use raw points", "exposure")
        return pd.DataFrame({
            "timestamp": pd.to_datetime([p.timestamp for p in points], utc=True),
            "lat": [p.lat for p in points], "lon": [p.lon for p in points],
            "wind": [p.wind for p in points], "pressure": [p.pressure for p in points],
            "sshs": [p.sshs for p in points],
        })
    return interpolate_track(points, step_hours)


def _storm_windows(sid: str, points: Sequence[TrackPoint], ports: Sequence[PortBoundary],
                   radius_km: float, step_hours: float, land: Optional[PortBoundary]) -> List[ExposureWindow]:
    pos = _storm_positions(sid, points, step_hours)
    lat, lon = pos["lat"].to_numpy(), pos["lon"].to_numpy()

    landfalls = np.empty((0, 2))
    over_land = None
    if land is not None:
        over_land = land.contains(lat, lon)
        entering = over_land & ~np.concatenate([[False], over_land[:-1]])
        # a track that starts over land has no landfall at its first point
        entering[0] = False
        landfalls = np.column_stack([lat[entering], lon[entering]])

    windows = []
    for port in ports:
        clat, clon = port.centroid()
        d = haversine_array(clat, clon, lat, lon)
        inr = d <= radius_km
        if not inr.any():
            continue
        times = pos["timestamp"][inr]
        close2port = None
        if over_land is not None:
            close2port = bool(len(landfalls)) and bool(
                (haversine_array(clat, clon, landfalls[:, 0], landfalls[:, 1]) <= radius_km).any())
        windows.append(ExposureWindow(
            port_id=port.port_id,
            storm_id=sid,
            start_date=times.min().date(),
            end_date=times.max().date(),
            min_distance_km=float(d.min()),
            max_sshs=int(pos["sshs"][inr].max()),
            closest_time=pos["timestamp"].iloc[int(np.argmin(d))],
            max_wind=float(pos["wind"][inr].max()),
            min_pressure=float(pos["pressure"][inr].min()),
            if_landfall=None if over_land is None else bool(over_land.any()),
            if_landfall_close2port=close2port,
        ))
    return windows


def detect_interactions(tracks: Dict[str, List[TrackPoint]], ports: Sequence[PortBoundary],
                        radius_km: float = 500.0, step_hours: float = 1.0,
                        land: Optional[PortBoundary] = None,
                        threads: Optional[int] = None) -> List[ExposureWindow]:
    """One window per (port, storm) whose interpolated eye track passes within radius_km."""
    sids = sorted(tracks)
    per_storm = parallel_map(
        lambda sid: _storm_windows(sid, tracks[sid], ports, radius_km, step_hours, land), sids, threads)
    windows = sorted((w for chunk in per_storm for w in chunk), key=lambda w: (w.storm_id, w.port_id))
    log_event("interactions", f"{len(windows)} port-storm interactions within {radius_km:g} km", "exposure")
    return windows


# === STATIONS ===
def load_station_table(path: str) -> pd.DataFrame:
    """Columns station_id, kind (gauge|weather), lat, lon."""
    df = pd.read_csv(path, dtype={"station_id": str})
    missing = {"station_id", "kind", "lat", "lon"} - set(df.columns)
    if missing:
        raise ValidationError(f"station table missing column(s): {', '.join(sorted(missing))}")
    return df


def load_station_series(path: str) -> pd.DataFrame:
    """Long format: station_id, timestamp, variable, value."""
    df = pd.read_csv(path, dtype={"station_id": str, "variable": str})
    missing = {"station_id", "timestamp", "variable", "value"} - set(df.columns)
    if missing:
        raise ValidationError(f"station series {path} missing column(s): {', '.join(sorted(missing))}")
    df["timestamp"] = pd.to_datetime(df["timestamp"], utc=True, format="ISO8601")
    df["value"] = pd.to_numeric(df["value"], errors="coerce")
    return df.dropna(subset=["value"])


def nearest_station(centroid: Tuple[float, float], stations: pd.DataFrame, kind: str,
                    max_radius_km: float) -> Optional[str]:
    cand = stations[stations["kind"] == kind]
    if cand.empty:
        return None
    d = haversine_array(centroid[0], centroid[1], cand["lat"].to_numpy(float), cand["lon"].to_numpy(float))
    i = int(np.argmin(d))
    return str(cand["station_id"].iloc[i]) if d[i] <= max_radius_km else None


def _readings(series: pd.DataFrame, station: str, variable: str, lo, hi) -> pd.Series:
    sel = (series["station_id"] == station) & (series["variable"] == variable)
    sel &= (series["timestamp"] >= lo) & (series["timestamp"] < hi)
    return series.loc[sel, "value"]


def join_weather(window: ExposureWindow, centroid: Tuple[float, float],
                 gauge_series: pd.DataFrame, weather_series: pd.DataFrame, stations: pd.DataFrame,
                 max_radius_km: float = 100.0, typical_days: int = 30) -> WeatherSummary:
    lo = pd.Timestamp(window.start_date, tz="UTC")
    hi = pd.Timestamp(window.end_date, tz="UTC") + pd.Timedelta(days=1)
    flagged = False

    wind = surge = rain = None
    gauge = nearest_station(centroid, stations, "gauge", max_radius_km)
    if gauge is None:
        flagged = True
    else:
        w = _readings(gauge_series, gauge, "wind_speed", lo, hi)
        wind = float(w.max()) if len(w) else None
        level = _readings(gauge_series, gauge, "water_level", lo, hi)
        typical = _readings(gauge_series, gauge, "water_level", lo - pd.Timedelta(days=typical_days), lo)
        if len(level) and len(typical):
            surge = float(level.max() - typical.median())
    weather = nearest_station(centroid, stations, "weather", max_radius_km)
    if weather is None:
        flagged = True
    else:
        r = _readings(weather_series, weather, "rainfall", lo, hi)
        rain = float(r.sum()) if len(r) else None

    flagged = flagged or wind is None or surge is None or rain is None
    if flagged:
        log_event("weather_flag", f"port {window.port_id} / {window.storm_id}: incomplete station data", "exposure")
    return WeatherSummary(window.port_id, window.storm_id, wind, surge, rain, flagged)


# === TABLES ===
def exposure_frame(windows: Sequence[ExposureWindow], weather: Sequence[Optional[WeatherSummary]]) -> pd.DataFrame:
    rows = []
    for w, s in zip(windows, weather):
        rows.append({
            "PID": w.port_id, "SID": w.storm_id,
            "start_date": w.start_date.isoformat(), "end_date": w.end_date.isoformat(),
            "DISTANCE": w.min_distance_km, "SSHS": w.max_sshs,
            "WIND": w.max_wind, "PRESSURE": w.min_pressure,
            "closest_time": fmt_time(w.closest_time) if w.closest_time is not None else None,
            "IF_LANDFALL": None if w.if_landfall is None else int(w.if_landfall),
            "IF_LANDFALL_CLOSE2PORT": None if w.if_landfall_close2port is None else int(w.if_landfall_close2port),
            "Wind_speed": s.wind_speed if s else None,
            "Surge_height": s.surge_height if s else None,
            "Rainfall": s.rainfall if s else None,
            "weather_flag": int(s.flagged) if s else 1,
        })
    return pd.DataFrame(rows, columns=EXPOSURE_COLUMNS)


def read_exposure(path: str) -> pd.DataFrame:
    return pd.read_csv(path, dtype={"SID": str})


def _flag(value) -> Optional[bool]:
    return None if pd.isna(value) else bool(int(value))


def windows_from_frame(df: pd.DataFrame) -> List[ExposureWindow]:
    out = []
    for r in df.itertuples(index=False):
        out.append(ExposureWindow(
            port_id=int(r.PID), storm_id=str(r.SID),
            start_date=dt.date.fromisoformat(str(r.start_date)),
            end_date=dt.date.fromisoformat(str(r.end_date)),
            min_distance_km=float(r.DISTANCE), max_sshs=int(r.SSHS),
            closest_time=parse_time(r.closest_time) if isinstance(r.closest_time, str) else None,
            max_wind=float(r.WIND), min_pressure=float(r.PRESSURE),
            if_landfall=_flag(r.IF_LANDFALL), if_landfall_close2port=_flag(r.IF_LANDFALL_CLOSE2PORT),
        ))
    return out
