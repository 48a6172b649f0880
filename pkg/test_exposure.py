import datetime as dt
import io
import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st

from ais_ingest import PortBoundary
from exposure import (
    EARTH_RADIUS_KM, EXPOSURE_COLUMNS, ExposureWindow, TrackPoint, detect_interactions, exposure_frame,
    haversine_km, interpolate_track, join_weather, nearest_station, parse_tracks, windows_from_frame,
)
from shared import ValidationError

KM_PER_DEG = EARTH_RADIUS_KM * math.pi / 180.0
T0 = pd.Timestamp("2022-09-01T00:00:00Z")

lat_st = st.floats(-90, 90, allow_nan=False)
lon_st = st.floats(-180, 180, allow_nan=False)


def port_at(pid, lat, lon, half=0.01):
    ring = ((lat - half, lon - half), (lat - half, lon + half), (lat + half, lon + half),
            (lat + half, lon - half), (lat - half, lon - half))
    return PortBoundary(pid, f"P{pid}", "Gulf", ((ring,),))


def equator_track(sid="S1", hours=10, sshs=3):
    """Eye moves along the equator from lon -5 to lon 5, one degree per hour."""
    return [TrackPoint(sid, T0, 0.0, -5.0, 100.0, 960.0, sshs),
            TrackPoint(sid, T0 + pd.Timedelta(hours=hours), 0.0, 5.0, 100.0, 960.0, sshs)]


# === HAVERSINE ===
def test_haversine_examples():
    assert haversine_km((0, 0), (0, 0)) == 0.0
    assert haversine_km((0, 0), (0, 1)) == pytest.approx(111.195, abs=0.01)
    assert haversine_km((0, 0), (0, 180)) == pytest.approx(20015.1, abs=0.5)


def test_haversine_rejects_out_of_range():
    with pytest.raises(ValueError):
        haversine_km((91, 0), (0, 0))


@given(lat_st, lon_st, lat_st, lon_st)
def test_haversine_symmetric_and_nonnegative(a, b, c, d):
    d1 = haversine_km((a, b), (c, d))
    assert d1 >= 0
    assert d1 == pytest.approx(haversine_km((c, d), (a, b)), abs=1e-6)
    assert d1 <= math.pi * EARTH_RADIUS_KM + 1e-6


# === TRACKS ===
def test_parse_tracks_sorts_and_dedups(caplog):
    text = ("SID,ISO_TIME,LAT,LON,WMO_WIND,WMO_PRES,USA_SSHS\n"
            "A,2022-09-01 06:00:00,25.0,-80.0,90,970,2\n"
            "A,2022-09-01 00:00:00,24.0,-79.0,80,980,1\n"
            "A,2022-09-01 06:00:00,25.0,-80.0,90,970,2\n"
            "B,2022-09-02 00:00:00,20.0,-70.0,40,1000,-5\n")
    tracks = parse_tracks(io.StringIO(text))
    assert list(tracks) == ["A", "B"]
    assert [p.lat for p in tracks["A"]] == [24.0, 25.0]
    assert tracks["B"][0].sshs == -1
    assert "TRACK_WARNING" in caplog.text


def test_parse_tracks_missing_column():
    with pytest.raises(ValidationError):
        parse_tracks(io.StringIO("SID,ISO_TIME,LAT,LON\nA,2022-09-01 00:00:00,1,2\n"))


def test_interpolate_track_keeps_fixes_and_hourly_grid():
    pts = [TrackPoint("A", T0, 10.0, 170.0, 50, 1000, 0),
           TrackPoint("A", T0 + pd.Timedelta(hours=6), 10.0, -170.0, 60, 995, 1)]
    df = interpolate_track(pts)
    assert len(df) == 7
    # crosses the antimeridian the short way
    assert df["lon"].iloc[3] == pytest.approx(180.0) or df["lon"].iloc[3] == pytest.approx(-180.0)
    assert df["sshs"].tolist() == [0, 0, 0, 0, 0, 0, 1]


# === INTERACTIONS ===
def test_buffer_boundary_499_in_501_out():
    inside = port_at(1, 499.0 / KM_PER_DEG, 0.0)
    outside = port_at(2, -501.0 / KM_PER_DEG, 0.0)
    windows = detect_interactions({"S1": equator_track()}, [inside, outside])
    assert [w.port_id for w in windows] == [1]
    assert windows[0].min_distance_km == pytest.approx(499.0, abs=0.01)
    assert windows[0].max_sshs == 3


def test_port_on_track_has_zero_distance():
    windows = detect_interactions({"S1": equator_track()}, [port_at(1, 0.0, 0.0)])
    assert windows[0].min_distance_km == pytest.approx(0.0, abs=1e-6)
    assert windows[0].closest_time == T0 + pd.Timedelta(hours=5)


def test_window_dates_span_in_range_times():
    track = [TrackPoint("S1", pd.Timestamp("2022-09-01T20:00:00Z"), 0.0, -2.0, 80, 980, 1),
             TrackPoint("S1", pd.Timestamp("2022-09-02T04:00:00Z"), 0.0, 2.0, 80, 980, 1)]
    w = detect_interactions({"S1": track}, [port_at(1, 0.0, 0.0)])[0]
    assert (w.start_date, w.end_date) == (dt.date(2022, 9, 1), dt.date(2022, 9, 2))


def test_single_fix_storm_uses_raw_point(caplog):
    track = [TrackPoint("S1", T0, 0.0, 0.0, 80, 980, 1)]
    windows = detect_interactions({"S1": track}, [port_at(1, 1.0, 0.0)])
    assert windows[0].min_distance_km == pytest.approx(KM_PER_DEG, abs=0.5)
    assert "TRACK_WARNING" in caplog.text


def test_interactions_invariant_to_port_order_and_unique():
    ports = [port_at(i, 0.5 * i, 0.0) for i in range(1, 6)]
    tracks = {"S1": equator_track("S1"), "S2": equator_track("S2", sshs=1)}
    a = detect_interactions(tracks, ports)
    b = detect_interactions(tracks, list(reversed(ports)), threads=3)
    assert a == b
    keys = [(w.storm_id, w.port_id) for w in a]
    assert len(keys) == len(set(keys))
    assert all(0 <= w.min_distance_km <= 500 for w in a)


def test_refined_sampling_never_increases_distance():
    track = [TrackPoint("S1", T0, -3.0, -3.0, 80, 980, 1), TrackPoint("S1", T0 + pd.Timedelta(hours=12), 3.0, 3.0, 80, 980, 1)]
    port = [port_at(1, 0.3, -0.2)]
    coarse = detect_interactions({"S1": track}, port, step_hours=6)[0].min_distance_km
    fine = detect_interactions({"S1": track}, port, step_hours=1)[0].min_distance_km
    assert fine <= coarse + 1e-9


def test_landfall_flags():
    land_ring = ((0.5, -10.0), (0.5, 10.0), (10.0, 10.0), (10.0, -10.0), (0.5, -10.0))
    land = PortBoundary(0, "land", "NonCoast", ((land_ring,),))
    track = [TrackPoint("S1", T0, -2.0, 0.0, 80, 980, 1), TrackPoint("S1", T0 + pd.Timedelta(hours=4), 2.0, 0.0, 80, 980, 1)]
    near, far = port_at(1, 0.0, 1.0), port_at(2, 0.0, 4.4)
    windows = detect_interactions({"S1": track}, [near, far], land=land)
    assert all(w.if_landfall for w in windows)
    assert windows[0].if_landfall_close2port


# === WEATHER ===
def _stations():
    return pd.DataFrame({"station_id": ["G1", "W1", "G_far"], "kind": ["gauge", "weather", "gauge"],
                         "lat": [0.1, 0.1, 5.0], "lon": [0.0, 0.0, 0.0]})


def _series(station, variable, start, hours, values):
    return pd.DataFrame({"station_id": station,
                         "timestamp": pd.date_range(start, periods=hours, freq="h", tz="UTC"),
                         "variable": variable, "value": values})


def _window():
    return ExposureWindow(1, "S1", dt.date(2022, 9, 1), dt.date(2022, 9, 2), 10.0, 2)


def test_surge_is_peak_over_typical_level():
    before = _series("G1", "water_level", "2022-08-02", 30 * 24, 0.3)
    during = _series("G1", "water_level", "2022-09-01", 48, np.r_[np.full(20, 0.3), 1.8, np.full(27, 0.3)])
    wind = _series("G1", "wind_speed", "2022-09-01", 48, np.linspace(10, 60, 48))
    rain = _series("W1", "rainfall", "2022-09-01", 48, 0.0)
    summary = join_weather(_window(), (0.0, 0.0), pd.concat([before, during, wind]), rain, _stations())
    assert summary.surge_height == pytest.approx(1.5)
    assert summary.wind_speed == pytest.approx(60.0)
    assert summary.rainfall == 0.0
    assert not summary.flagged


def test_flat_water_level_gives_zero_surge():
    level = _series("G1", "water_level", "2022-08-02", 32 * 24, 0.4)
    wind = _series("G1", "wind_speed", "2022-09-01", 48, 10.0)
    rain = _series("W1", "rainfall", "2022-09-01", 48, 1.0)
    summary = join_weather(_window(), (0.0, 0.0), pd.concat([level, wind]), rain, _stations())
    assert summary.surge_height == pytest.approx(0.0)
    assert summary.rainfall == pytest.approx(48.0)


def test_no_station_within_radius_is_flagged(caplog):
    stations = _stations().assign(lat=[3.0, 3.0, 5.0])
    empty = pd.DataFrame(columns=["station_id", "timestamp", "variable", "value"])
    summary = join_weather(_window(), (0.0, 0.0), empty, empty, stations, max_radius_km=100.0)
    assert summary.flagged
    assert summary.surge_height is None and summary.rainfall is None
    assert "WEATHER_FLAG" in caplog.text


def test_nearest_station_by_kind():
    assert nearest_station((0.0, 0.0), _stations(), "gauge", 100.0) == "G1"
    assert nearest_station((0.0, 0.0), _stations(), "gauge", 5.0) is None


def test_exposure_table_columns_and_round_trip(tmp_path):
    windows = detect_interactions({"S1": equator_track()}, [port_at(1, 1.0, 0.0)])
    df = exposure_frame(windows, [None])
    assert list(df.columns) == EXPOSURE_COLUMNS
    path = tmp_path / "exposure.csv"
    df.to_csv(path, index=False)
    back = windows_from_frame(pd.read_csv(path, dtype={"SID": str}))
    assert back[0].port_id == 1 and back[0].start_date == windows[0].start_date


def test_landfall_flags_survive_round_trip(tmp_path):
    day = dt.date(2022, 9, 1)
    windows = [ExposureWindow(1, "S1", day, day, 80.0, 2, if_landfall=True, if_landfall_close2port=False),
               ExposureWindow(2, "S1", day, day, 90.0, 1)]
    path = tmp_path / "exposure.csv"
    exposure_frame(windows, [None, None]).to_csv(path, index=False)
    back = windows_from_frame(pd.read_csv(path, dtype={"SID": str}))
    assert (back[0].if_landfall, back[0].if_landfall_close2port) == (True, False)
    assert (back[1].if_landfall, back[1].if_landfall_close2port) == (None, None)
