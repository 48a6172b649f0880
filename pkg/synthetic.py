"""
Synthetic fixture set for demos and end-to-end tests.

Writes port polygons, AIS pings, storm tracks, gauge and weather series,
a station table, a land polygon, a census table and a demo config. Cyclones
passing close to a port cut its commercial traffic by 80% for a few days,
longer for stronger storms.
"""
from __future__ import annotations

import datetime as dt
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from exposure import haversine_array
from shared import fmt_time, log_event, write_json, write_table

FIXTURE_FILES = {
    "ais": "ais.csv", "ports": "ports.geojson", "tracks": "tracks.csv", "gauges": "gauges.csv",
    "weather": "weather.csv", "stations": "stations.csv", "land": "land.geojson", "census": "census.csv",
}

# (name, coast, lat, lon, mean daily vessels)
PORTS: List[Tuple[str, str, float, float, float]] = [
    ("Gulf West", "Gulf", 29.73, -95.27, 12.0),
    ("Gulf Delta", "Gulf", 29.93, -90.06, 10.0),
    ("Gulf Bay", "Gulf", 30.69, -88.04, 7.0),
    ("Gulf Peninsula", "Gulf", 27.95, -82.45, 8.0),
    ("East Strait", "East", 25.77, -80.17, 11.0),
    ("East Harbor", "East", 32.08, -81.09, 9.0),
    ("East Sound", "East", 32.78, -79.92, 6.0),
    ("East Roads", "East", 36.85, -76.29, 10.0),
    ("East Narrows", "East", 40.67, -74.04, 14.0),
    ("Pacific South", "Pacific", 33.74, -118.27, 13.0),
    ("Pacific North", "Pacific", 47.60, -122.34, 8.0),
    ("River Landing", "NonCoast", 35.15, -90.05, 3.0),
]
HALF_SIDE_DEG = 0.05
SEA_OFFSET_DEG = 0.5
IMPACT_KM = 200.0
DROP = 0.8
HEADING = np.array([0.6, -0.8])  # (north, east) unit vector, storms travel north-west
SPEED_KMH = 22.0
TRACK_HOURS = 60
WIND_BY_SSHS = {0: 50.0, 1: 75.0, 2: 90.0, 3: 105.0, 4: 125.0, 5: 145.0}


@dataclass(frozen=True)
class SyntheticStorm:
    storm_id: str
    target: int
    closest: pd.Timestamp
    miss_km: float
    sshs: int


def _square(lat: float, lon: float, half: float) -> List[List[float]]:
    return [[lon - half, lat - half], [lon + half, lat - half], [lon + half, lat + half],
            [lon - half, lat + half], [lon - half, lat - half]]


def ports_geojson() -> dict:
    return {"type": "FeatureCollection", "features": [
        {"type": "Feature",
         "properties": {"port_id": pid, "name": name, "coast": coast},
         "geometry": {"type": "Polygon", "coordinates": [_square(lat, lon, HALF_SIDE_DEG)]}}
        for pid, (name, coast, lat, lon, _) in enumerate(PORTS, start=1)]}


def land_geojson() -> dict:
    ring = [[-125.0, 30.5], [-67.0, 30.5], [-67.0, 49.0], [-125.0, 49.0], [-125.0, 30.5]]
    return {"type": "FeatureCollection", "features": [
        {"type": "Feature", "properties": {"name": "mainland"}, "geometry": {"type": "Polygon", "coordinates": [ring]}}]}


# === STORMS ===
def plan_storms(start: dt.date, days: int, rng: np.random.Generator, n_storms: int = 14) -> List[SyntheticStorm]:
    """Storms in the Jun-Nov seasons of the covered period, aimed at coastal ports."""
    season = [start + dt.timedelta(days=i) for i in range(45, days - 45)
              if 6 <= (start + dt.timedelta(days=i)).month <= 11]
    if not season:
        season = [start + dt.timedelta(days=i) for i in range(45, max(days - 45, 46))]
    picks = np.sort(rng.choice(len(season), size=min(n_storms, len(season)), replace=False))
    coastal = [pid for pid, p in enumerate(PORTS, start=1) if p[1] != "NonCoast"]
    storms = []
    for k, i in enumerate(picks):
        day = season[int(i)]
        closest = pd.Timestamp(day, tz="UTC") + pd.Timedelta(hours=int(rng.integers(0, 24)))
        storms.append(SyntheticStorm(
            storm_id=f"{day.year}{k + 1:02d}SYN",
            target=int(rng.choice(coastal)),
            closest=closest,
            miss_km=float(rng.uniform(0.0, 150.0)),
            sshs=int(rng.integers(0, 6)),
        ))
    return storms


def storm_track(storm: SyntheticStorm, step_hours: int = 1) -> pd.DataFrame:
    """Straight-line eye track passing miss_km from the target port at the closest-approach time."""
    _, _, lat0, lon0, _ = PORTS[storm.target - 1]
    hours = np.arange(-TRACK_HOURS, TRACK_HOURS + 1, step_hours)
    perp = np.array([-HEADING[1], HEADING[0]])
    north = storm.miss_km * perp[0] + SPEED_KMH * hours * HEADING[0]
    east = storm.miss_km * perp[1] + SPEED_KMH * hours * HEADING[1]
    lat = lat0 + north / 111.0
    lon = lon0 + east / (111.0 * np.cos(np.radians(lat0)))
    # intensity builds toward the closest approach and decays after
    sshs = np.clip(storm.sshs - (np.abs(hours) // 24), -1, 5).astype(int)
    wind = np.array([WIND_BY_SSHS.get(max(s, 0), 50.0) for s in sshs]) - 5.0 * (sshs < 0)
    return pd.DataFrame({
        "timestamp": storm.closest + pd.to_timedelta(hours, unit="h"),
        "lat": lat, "lon": lon, "sshs": sshs, "wind": wind, "pressure": 1010.0 - 0.55 * wind,
    })


def tracks_frame(storms: List[SyntheticStorm]) -> pd.DataFrame:
    rows = []
    for s in storms:
        tr = storm_track(s, step_hours=6)
        rows.append(pd.DataFrame({
            "SID": s.storm_id, "ISO_TIME": [fmt_time(t) for t in tr["timestamp"]],
            "LAT": tr["lat"].round(4), "LON": tr["lon"].round(4),
            "WMO_WIND": tr["wind"], "WMO_PRES": tr["pressure"].round(1), "USA_SSHS": tr["sshs"],
        }))
    return pd.concat(rows, ignore_index=True)


def disruption_factors(storms: List[SyntheticStorm], start: dt.date, days: int) -> np.ndarray:
    """(ports, days) multiplier on expected traffic; 0.2 on injected impact days, 1 elsewhere."""
    factor = np.ones((len(PORTS), days))
    for s in storms:
        tr = storm_track(s)
        for pid, (_, _, lat, lon, _) in enumerate(PORTS):
            d = haversine_array(lat, lon, tr["lat"].to_numpy(), tr["lon"].to_numpy())
            if d.min() > IMPACT_KM:
                continue
            first = (tr["timestamp"].iloc[int(np.argmin(d))].date() - start).days
            length = 3 + max(s.sshs, 0)
            lo, hi = max(first, 0), min(first + length, days)
            factor[pid, lo:hi] = np.minimum(factor[pid, lo:hi], 1.0 - DROP)
    return factor


# === AIS ===
def expected_counts(start: dt.date, days: int) -> np.ndarray:
    t = np.arange(days)
    epoch = (start - dt.date(1970, 1, 1)).days + t
    weekly = 1.0 + 0.15 * np.sin(2 * np.pi * epoch / 7.0)
    yearly = 1.0 + 0.1 * np.cos(2 * np.pi * epoch / 365.25)
    return np.array([p[4] * weekly * yearly for p in PORTS])


def ais_frame(start: dt.date, days: int, factors: np.ndarray, rng: np.random.Generator,
              fleet: int = 160) -> pd.DataFrame:
    """Arrival, departure and an at-sea ping per call; a few short calls and non-commercial vessels mixed in."""
    counts = rng.poisson(expected_counts(start, days) * factors)
    rows: List[tuple] = []
    commercial_types = (70, 71, 79, 80, 84, 89)
    vessel_type = {v: int(commercial_types[v % len(commercial_types)]) for v in range(fleet)}
    for day in range(days):
        date = pd.Timestamp(start + dt.timedelta(days=day), tz="UTC")
        need = int(counts[:, day].sum())
        vessels = rng.choice(fleet, size=min(need, fleet), replace=False)
        k = 0
        for pid in range(len(PORTS)):
            _, _, lat, lon, _ = PORTS[pid]
            for _ in range(int(counts[pid, day])):
                if k >= len(vessels):
                    break
                v = int(vessels[k])
                k += 1
                arrive = date + pd.Timedelta(hours=int(rng.integers(0, 4)))
                dwell = float(rng.uniform(5.0, 17.0)) if rng.random() > 0.03 else 3.0
                leave = arrive + pd.Timedelta(hours=dwell)
                jl, jo = rng.uniform(-0.02, 0.02, 2)
                mmsi = str(366000000 + v)
                rows.append((mmsi, arrive, lat + jl, lon + jo, vessel_type[v]))
                rows.append((mmsi, leave, lat - jl, lon - jo, vessel_type[v]))
                rows.append((mmsi, leave + pd.Timedelta(hours=2), lat + SEA_OFFSET_DEG, lon + SEA_OFFSET_DEG,
                             vessel_type[v]))
        # fishing and passenger traffic, filtered out by the commercial-type rule
        for pid in rng.choice(len(PORTS), size=2, replace=False):
            _, _, lat, lon, _ = PORTS[int(pid)]
            mmsi = str(338000000 + int(pid))
            arrive = date + pd.Timedelta(hours=8)
            rows.append((mmsi, arrive, lat, lon, 30))
            rows.append((mmsi, arrive + pd.Timedelta(hours=6), lat, lon, 30))
            rows.append((mmsi, arrive + pd.Timedelta(hours=8), lat + SEA_OFFSET_DEG, lon, 30))
    df = pd.DataFrame(rows, columns=["MMSI", "BaseDateTime", "LAT", "LON", "VesselType"])
    df = df.sort_values(["BaseDateTime", "MMSI"], kind="mergesort").reset_index(drop=True)
    df["BaseDateTime"] = [fmt_time(t) for t in df["BaseDateTime"]]
    df["LAT"] = df["LAT"].round(5)
    df["LON"] = df["LON"].round(5)
    return df


# === STATIONS ===
def stations_frame() -> pd.DataFrame:
    rows = []
    # the inland port has no station coverage and gets flagged weather
    for pid, (_, coast, lat, lon, _) in enumerate(PORTS, start=1):
        if coast == "NonCoast":
            continue
        rows.append((f"G{pid:03d}", "gauge", round(lat + 0.1, 4), round(lon + 0.1, 4)))
        rows.append((f"W{pid:03d}", "weather", round(lat - 0.1, 4), round(lon - 0.1, 4)))
    return pd.DataFrame(rows, columns=["station_id", "kind", "lat", "lon"])


def _storm_proximity(stations: pd.DataFrame, storms: List[SyntheticStorm],
                     times: pd.DatetimeIndex) -> Dict[str, np.ndarray]:
    """Per station, (closeness in [0,1], storm wind) at each timestamp; 0 beyond 500 km."""
    out = {}
    for st in stations.itertuples(index=False):
        close = np.zeros(len(times))
        wind = np.zeros(len(times))
        for s in storms:
            tr = storm_track(s)
            idx = times.get_indexer(pd.DatetimeIndex(tr["timestamp"]))
            ok = idx >= 0
            d = haversine_array(st.lat, st.lon, tr["lat"].to_numpy()[ok], tr["lon"].to_numpy()[ok])
            c = np.clip(1.0 - d / 500.0, 0.0, 1.0)
            better = c > close[idx[ok]]
            close[idx[ok][better]] = c[better]
            wind[idx[ok][better]] = tr["wind"].to_numpy()[ok][better]
        out[st.station_id] = np.column_stack([close, wind])
    return out


def station_series(stations: pd.DataFrame, storms: List[SyntheticStorm], start: dt.date, days: int,
                   rng: np.random.Generator) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Gauge readings (water_level, wind_speed) every 3 h and daily rainfall, long format."""
    hourly = pd.date_range(pd.Timestamp(start, tz="UTC"), periods=days * 24, freq="h")
    prox = _storm_proximity(stations, storms, hourly)
    sample = np.arange(0, len(hourly), 3)
    gauge_rows, weather_rows = [], []
    for st in stations.itertuples(index=False):
        close, wind = prox[st.station_id][:, 0], prox[st.station_id][:, 1]
        if st.kind == "gauge":
            t_h = np.arange(len(hourly))
            level = 0.5 * np.sin(2 * np.pi * t_h / 12.42) + rng.normal(0, 0.05, len(hourly)) + 2.5 * close
            speed = 8.0 + rng.gamma(2.0, 1.5, len(hourly)) + 0.6 * wind * close
            stamp = [fmt_time(t) for t in hourly[sample]]
            gauge_rows.append(pd.DataFrame({"station_id": st.station_id, "timestamp": stamp,
                                            "variable": "water_level", "value": level[sample].round(3)}))
            gauge_rows.append(pd.DataFrame({"station_id": st.station_id, "timestamp": stamp,
                                            "variable": "wind_speed", "value": speed[sample].round(2)}))
        else:
            daily_close = close.reshape(days, 24).max(axis=1)
            rain = rng.gamma(0.6, 3.0, days) + 120.0 * daily_close ** 2
            stamp = [fmt_time(pd.Timestamp(start + dt.timedelta(days=i), tz="UTC")) for i in range(days)]
            weather_rows.append(pd.DataFrame({"station_id": st.station_id, "timestamp": stamp,
                                              "variable": "rainfall", "value": rain.round(2)}))
    return pd.concat(gauge_rows, ignore_index=True), pd.concat(weather_rows, ignore_index=True)


def census_frame(rng: np.random.Generator) -> pd.DataFrame:
    rows = []
    for pid, (name, coast, _, _, mean) in enumerate(PORTS, start=1):
        rows.append({
            "port_id": pid, "name": name, "coast": coast,
            "Pop_C": int(rng.lognormal(13.0, 0.8)),
            "WF": int(rng.random() < 0.5),
            "PCT_Pov": round(float(rng.uniform(8.0, 25.0)), 2),
            "PCT_TI": int(rng.random() < 0.5),
            "PCT_TA": int(rng.random() < 0.5),
            "Dock_Count": int(rng.poisson(mean * 4) + 1),
            "Railway_Length": round(float(rng.uniform(5.0, 120.0)), 2),
            "Highway_Length": round(float(rng.uniform(10.0, 200.0)), 2),
        })
    return pd.DataFrame(rows)


def demo_config(out_name: str = "out") -> dict:
    """Production defaults everywhere except the history minimum and the MCMC budget, sized for a laptop."""
    small = {"chains": 2, "iterations": 1200, "burn_in": 600, "thin": 1, "target_accept": 0.3,
             "adapt_window": 50, "max_iterations": 2400, "rhat_threshold": 1.1}
    return {
        "inputs": dict(FIXTURE_FILES),
        "out_dir": out_name,
        "baseline": {"min_history_days": 180, "n_changepoints": 10},
        "model": {
            "covariates": {
                "SSHS_3": "indicator", "SSHS_4": "indicator", "SSHS_5": "indicator",
                "Wind_speed": "continuous", "Surge_height": "continuous", "Rainfall": "continuous",
                "DISTANCE": "continuous", "Ln_Pop_C": "continuous", "Dock_Count": "continuous",
                "D_normal": "continuous",
            },
            "random_candidates": ["Surge_height", "DISTANCE"],
            "mcmc": small,
        },
        "effects": {"halton_draws": 100,
                    "stepwise_mcmc": {**small, "iterations": 400, "burn_in": 200, "max_iterations": 400}},
    }


def generate_fixtures(out_dir: str, seed: int = 20240601, days: int = 540,
                      start: Optional[dt.date] = None) -> Dict[str, str]:
    """Write every fixture file plus demo_config.json into out_dir. Returns name -> path."""
    rng = np.random.default_rng(seed)
    start = start or dt.date(2021, 7, 1)
    os.makedirs(out_dir, exist_ok=True)
    paths = {k: os.path.join(out_dir, v) for k, v in FIXTURE_FILES.items()}

    storms = plan_storms(start, days, rng)
    factors = disruption_factors(storms, start, days)
    write_json(paths["ports"], ports_geojson())
    write_json(paths["land"], land_geojson())
    write_table(paths["tracks"], tracks_frame(storms))
    write_table(paths["ais"], ais_frame(start, days, factors, rng))
    stations = stations_frame()
    write_table(paths["stations"], stations)
    gauges, weather = station_series(stations, storms, start, days, rng)
    write_table(paths["gauges"], gauges)
    write_table(paths["weather"], weather)
    write_table(paths["census"], census_frame(rng))
    paths["config"] = os.path.join(out_dir, "demo_config.json")
    write_json(paths["config"], demo_config())
    log_event("simulate", f"{len(storms)} storms, {int((factors < 1).sum())} disrupted port-days, "
              f"{days} days from {start.isoformat()} -> {out_dir}", "synthetic")
    return paths
