"""
AIS ingestion: parse position reports, keep commercial traffic, segment each
vessel's track into port calls against port polygons, then aggregate calls
into daily per-port vessel counts and origin-destination legs.
"""
from __future__ import annotations

import json
import datetime as dt
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, Iterable, List, Optional, Sequence, TextIO, Tuple

import numpy as np
import pandas as pd

from shared import (
    VESSEL_TYPE_DATA, ValidationError, log_event, parallel_map, write_table,
    fmt_time, parse_time,
)

COASTS = ("Gulf", "East", "Pacific", "NonCoast")
CALL_COLUMNS = ["vessel_id", "port_id", "arrival", "departure"]
OD_COLUMNS = ["vessel_id", "origin_port", "dest_port", "depart", "arrive", "self_loop"]
DAILY_COLUMNS = ["port_id", "date", "count"]

Ring = Tuple[Tuple[float, float], ...]


@dataclass(frozen=True)
class AisPoint:
    vessel_id: str
    timestamp: pd.Timestamp
    lat: float
    lon: float
    vessel_type: int


@dataclass(frozen=True)
class PortBoundary:
    """Port polygon(s). Rings hold (lat, lon) vertices; ring 0 of each polygon is the outer ring."""
    port_id: int
    name: str
    coast: str
    polygons: Tuple[Tuple[Ring, ...], ...]

    @cached_property
    def _rings(self) -> List[np.ndarray]:
        return [np.asarray(ring, dtype=float) for poly in self.polygons for ring in poly]

    @cached_property
    def bounds(self) -> Tuple[float, float, float, float]:
        allv = np.vstack(self._rings)
        return (allv[:, 0].min(), allv[:, 1].min(), allv[:, 0].max(), allv[:, 1].max())

    def contains(self, lats, lons) -> np.ndarray:
        """Even-odd ray casting on (lon, lat), treated as planar. Holes fall out of the parity rule."""
        lats = np.atleast_1d(np.asarray(lats, dtype=float))
        lons = np.atleast_1d(np.asarray(lons, dtype=float))
        lat0, lon0, lat1, lon1 = self.bounds
        inside = np.zeros(lats.shape, dtype=bool)
        cand = (lats >= lat0) & (lats <= lat1) & (lons >= lon0) & (lons <= lon1)
        if not cand.any():
            return inside
        y, x = lats[cand], lons[cand]
        parity = np.zeros(y.shape, dtype=bool)
        for ring in self._rings:
            for (y1, x1), (y2, x2) in zip(ring[:-1], ring[1:]):
                crosses = (y1 > y) != (y2 > y)
                with np.errstate(divide="ignore", invalid="ignore"):
                    xcross = (x2 - x1) * (y - y1) / (y2 - y1) + x1
                parity ^= crosses & (x < xcross)
        inside[cand] = parity
        return inside

    def centroid(self) -> Tuple[float, float]:
        """Area-weighted centroid of the outer rings, as (lat, lon)."""
        total, cy, cx = 0.0, 0.0, 0.0
        for poly in self.polygons:
            ring = np.asarray(poly[0], dtype=float)
            y, x = ring[:, 0], ring[:, 1]
            cross = x[:-1] * y[1:] - x[1:] * y[:-1]
            a = cross.sum() / 2.0
            if a == 0:
                continue
            cx += ((x[:-1] + x[1:]) * cross).sum() / 6.0
            cy += ((y[:-1] + y[1:]) * cross).sum() / 6.0
            total += a
        if total == 0:
            ring = np.asarray(self.polygons[0][0], dtype=float)[:-1]
            return float(ring[:, 0].mean()), float(ring[:, 1].mean())
        return cy / total, cx / total


@dataclass(frozen=True)
class PortCall:
    vessel_id: str
    port_id: int
    arrival: pd.Timestamp
    departure: pd.Timestamp

    @property
    def dwell(self) -> pd.Timedelta:
        return self.departure - self.arrival


@dataclass(frozen=True)
class OdRecord:
    vessel_id: str
    origin_port: int
    dest_port: int
    depart: pd.Timestamp
    arrive: pd.Timestamp
    self_loop: bool = False


@dataclass(frozen=True)
class DailySeries:
    port_id: int
    start_date: dt.date
    counts: np.ndarray

    @property
    def dates(self) -> pd.DatetimeIndex:
        return pd.date_range(self.start_date, periods=len(self.counts), freq="D")

    @property
    def end_date(self) -> dt.date:
        return self.start_date + dt.timedelta(days=len(self.counts) - 1)

    def index_of(self, day: dt.date) -> int:
        return (day - self.start_date).days


# === PARSING ===
def parse_ais(stream: TextIO, schema: Optional[Dict[str, str]] = None) -> Tuple[List[AisPoint], int]:
    """Read delimited AIS text. Returns (points in input order, rejected row count)."""
    schema = schema or {"vessel_id": "MMSI", "timestamp": "BaseDateTime", "lat": "LAT",
                        "lon": "LON", "vessel_type": "VesselType"}
    bad_lines: List[List[str]] = []

    def _on_bad(line):
        bad_lines.append(line)
        return None

    df = pd.read_csv(stream, dtype=str, engine="python", on_bad_lines=_on_bad,
                     skip_blank_lines=True, keep_default_na=False)
    missing = [col for col in schema.values() if col not in df.columns]
    if missing:
        raise ValidationError(f"AIS input is missing required column(s): {', '.join(missing)}")

    vid = df[schema["vessel_id"]].str.strip()
    ts = pd.to_datetime(df[schema["timestamp"]].str.strip(), utc=True, errors="coerce", format="ISO8601")
    lat = pd.to_numeric(df[schema["lat"]], errors="coerce")
    lon = pd.to_numeric(df[schema["lon"]], errors="coerce")
    vtype = pd.to_numeric(df[schema["vessel_type"]], errors="coerce")

    ok = (vid.str.len() > 0) & ts.notna() & lat.between(-90, 90) & lon.between(-180, 180)
    ok &= vtype.notna() & (vtype == vtype.round())
    rejects = len(bad_lines) + int((~ok).sum())

    points = [
        AisPoint(v, t.floor("s"), float(a), float(o), int(k))
        for v, t, a, o, k in zip(vid[ok], ts[ok], lat[ok], lon[ok], vtype[ok])
    ]
    log_event("parse", f"{len(points)} AIS points accepted, {rejects} rejected", "ingest")
    return points, rejects


def commercial_type_codes(categories: Optional[Iterable[str]] = None) -> frozenset:
    table = VESSEL_TYPE_DATA["ais_ship_types"]
    wanted = set(categories or table["commercial_categories"])
    return frozenset(
        code for block in table["blocks"] if block["category"] in wanted
        for code in range(block["from"], block["to"] + 1)
    )


def filter_commercial(points: Sequence[AisPoint], categories: Optional[Iterable[str]] = None) -> List[AisPoint]:
    codes = commercial_type_codes(categories)
    return [p for p in points if p.vessel_type in codes]


def load_port_boundaries(path: str) -> List[PortBoundary]:
    """GeoJSON FeatureCollection with properties {port_id, name, coast}; sorted by port_id."""
    with open(path, "r", encoding="utf-8") as f:
        gj = json.load(f)
    ports: Dict[int, PortBoundary] = {}
    for feat in gj.get("features", []):
        props = feat.get("properties", {})
        geom = feat.get("geometry") or {}
        if "port_id" not in props:
            raise ValidationError("port feature without port_id")
        pid = int(props["port_id"])
        if pid in ports:
            raise ValidationError(f"duplicate port_id {pid} in {path}")
        coast = props.get("coast", "NonCoast")
        if coast not in COASTS:
            raise ValidationError(f"port {pid}: unknown coast '{coast}'")
        if geom.get("type") == "Polygon":
            raw = [geom["coordinates"]]
        elif geom.get("type") == "MultiPolygon":
            raw = geom["coordinates"]
        else:
            raise ValidationError(f"port {pid}: unsupported geometry {geom.get('type')}")
        polys = []
        for poly in raw:
            rings = []
            for ring in poly:
                pts = tuple((float(lat), float(lon)) for lon, lat in ring)
                if pts[0] != pts[-1]:
                    raise ValidationError(f"port {pid}: ring is not closed")
                if len(set(pts)) < 3:
                    raise ValidationError(f"port {pid}: ring has fewer than 3 distinct vertices")
                rings.append(pts)
            polys.append(tuple(rings))
        ports[pid] = PortBoundary(pid, str(props.get("name", pid)), coast, tuple(polys))
    return [ports[k] for k in sorted(ports)]


# === SEGMENTATION ===
def assign_ports(lats, lons, boundaries: Sequence[PortBoundary]) -> np.ndarray:
    """Port id per point (-1 outside). Overlaps resolve to the smallest port_id."""
    lats = np.asarray(lats, dtype=float)
    lons = np.asarray(lons, dtype=float)
    out = np.full(lats.shape, -1, dtype=np.int64)
    for b in sorted(boundaries, key=lambda b: b.port_id):
        hit = b.contains(lats, lons)
        clash = hit & (out >= 0)
        if clash.any():
            others = sorted(set(out[clash].tolist()))
            log_event("overlap_warning",
                      f"{int(clash.sum())} point(s) inside ports {others} and {b.port_id}; kept smallest id",
                      "ingest")
        out[hit & (out < 0)] = b.port_id
    return out


def segment_port_calls(points: Sequence[AisPoint], boundaries: Sequence[PortBoundary],
                       min_dwell: dt.timedelta = dt.timedelta(hours=4),
                       max_gap: dt.timedelta = dt.timedelta(hours=24)) -> List[PortCall]:
    """Calls for one vessel: runs of consecutive inside points at the same port."""
    if not points:
        return []
    pts = sorted(points, key=lambda p: p.timestamp)
    port_ids = assign_ports([p.lat for p in pts], [p.lon for p in pts], boundaries)
    min_dwell, max_gap = pd.Timedelta(min_dwell), pd.Timedelta(max_gap)

    calls: List[PortCall] = []
    current, arrival, last = -1, None, None
    for p, pid in zip(pts, port_ids.tolist()):
        if current >= 0 and pid == current and p.timestamp - last <= max_gap:
            last = p.timestamp
            continue
        if current >= 0:
            calls.append(PortCall(pts[0].vessel_id, current, arrival, last))
        current, arrival, last = pid, p.timestamp, p.timestamp
    if current >= 0:
        calls.append(PortCall(pts[0].vessel_id, current, arrival, last))
    return [c for c in calls if c.dwell >= min_dwell]


def segment_all(points: Sequence[AisPoint], boundaries: Sequence[PortBoundary],
                min_dwell: dt.timedelta = dt.timedelta(hours=4),
                max_gap: dt.timedelta = dt.timedelta(hours=24),
                threads: Optional[int] = None) -> List[PortCall]:
    by_vessel: Dict[str, List[AisPoint]] = {}
    for p in points:
        by_vessel.setdefault(p.vessel_id, []).append(p)
    vessels = sorted(by_vessel)
    per_vessel = parallel_map(
        lambda v: segment_port_calls(by_vessel[v], boundaries, min_dwell, max_gap), vessels, threads)
    calls = [c for chunk in per_vessel for c in chunk]
    log_event("segment", f"{len(calls)} port calls from {len(vessels)} vessels", "ingest")
    return calls


# === AGGREGATION ===
def build_daily_series(calls: Sequence[PortCall], port_id: int,
                       start_date: dt.date, end_date: dt.date) -> DailySeries:
    """Distinct vessels per day whose [arrival, departure] intersects the day."""
    if end_date < start_date:
        raise ValidationError(f"empty date range {start_date}..{end_date}")
    n = (end_date - start_date).days + 1
    days_by_vessel: Dict[str, set] = {}
    for c in calls:
        if c.port_id != port_id:
            continue
        first = max((c.arrival.date() - start_date).days, 0)
        last = min((c.departure.date() - start_date).days, n - 1)
        if last < first:
            continue
        days_by_vessel.setdefault(c.vessel_id, set()).update(range(first, last + 1))
    counts = np.zeros(n, dtype=np.int64)
    for days in days_by_vessel.values():
        counts[list(days)] += 1
    return DailySeries(port_id, start_date, counts)


def build_all_daily_series(calls: Sequence[PortCall], port_ids: Iterable[int],
                           start_date: dt.date, end_date: dt.date,
                           threads: Optional[int] = None) -> Dict[int, DailySeries]:
    port_ids = sorted(port_ids)
    series = parallel_map(lambda pid: build_daily_series(calls, pid, start_date, end_date), port_ids, threads)
    return dict(zip(port_ids, series))


def extract_od(calls: Sequence[PortCall]) -> List[OdRecord]:
    """Consecutive call pairs of one vessel; A->A legs kept and flagged."""
    ordered = sorted(calls, key=lambda c: c.arrival)
    return [
        OdRecord(a.vessel_id, a.port_id, b.port_id, a.departure, b.arrival, a.port_id == b.port_id)
        for a, b in zip(ordered, ordered[1:])
    ]


def extract_all_od(calls: Sequence[PortCall]) -> List[OdRecord]:
    by_vessel: Dict[str, List[PortCall]] = {}
    for c in calls:
        by_vessel.setdefault(c.vessel_id, []).append(c)
    return [od for v in sorted(by_vessel) for od in extract_od(by_vessel[v])]


def port_mean_daily_counts(series: Dict[int, DailySeries]) -> Dict[int, float]:
    return {pid: float(s.counts.mean()) if len(s.counts) else 0.0 for pid, s in series.items()}


def calls_date_range(calls: Sequence[PortCall]) -> Tuple[dt.date, dt.date]:
    if not calls:
        raise ValidationError("no port calls; cannot infer a date range")
    return min(c.arrival for c in calls).date(), max(c.departure for c in calls).date()


# === TABLES ===
def calls_to_frame(calls: Sequence[PortCall]) -> pd.DataFrame:
    return pd.DataFrame(
        [(c.vessel_id, c.port_id, fmt_time(c.arrival), fmt_time(c.departure)) for c in calls],
        columns=CALL_COLUMNS)


def read_calls(path: str) -> List[PortCall]:
    df = pd.read_csv(path, dtype={"vessel_id": str})
    return [PortCall(r.vessel_id, int(r.port_id), parse_time(r.arrival), parse_time(r.departure))
            for r in df.itertuples(index=False)]


def od_to_frame(records: Sequence[OdRecord]) -> pd.DataFrame:
    return pd.DataFrame(
        [(r.vessel_id, r.origin_port, r.dest_port, fmt_time(r.depart), fmt_time(r.arrive), int(r.self_loop))
         for r in records],
        columns=OD_COLUMNS)


def read_od(path: str) -> List[OdRecord]:
    df = pd.read_csv(path, dtype={"vessel_id": str})
    return [OdRecord(r.vessel_id, int(r.origin_port), int(r.dest_port),
                     parse_time(r.depart), parse_time(r.arrive), bool(r.self_loop))
            for r in df.itertuples(index=False)]


def daily_to_frame(series: Dict[int, DailySeries]) -> pd.DataFrame:
    frames = [
        pd.DataFrame({"port_id": pid, "date": s.dates.strftime("%Y-%m-%d"), "count": s.counts})
        for pid, s in sorted(series.items())
    ]
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=DAILY_COLUMNS)


def read_daily(path: str) -> Dict[int, DailySeries]:
    df = pd.read_csv(path, parse_dates=["date"])
    out: Dict[int, DailySeries] = {}
    for pid, grp in df.groupby("port_id", sort=True):
        grp = grp.sort_values("date")
        out[int(pid)] = DailySeries(int(pid), grp["date"].iloc[0].date(), grp["count"].to_numpy(np.int64))
    return out


def write_ingest_tables(out_dir: str, calls, od, series) -> List[str]:
    paths = [f"{out_dir}/port_calls.csv", f"{out_dir}/od_records.csv", f"{out_dir}/daily_counts.csv"]
    write_table(paths[0], calls_to_frame(calls), CALL_COLUMNS)
    write_table(paths[1], od_to_frame(od), OD_COLUMNS)
    write_table(paths[2], daily_to_frame(series), DAILY_COLUMNS)
    return paths
