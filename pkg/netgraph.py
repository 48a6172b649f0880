"""
Weekly freight graphs and port centralities.

Two ports share an edge in week w when one vessel has calls at both that
intersect w. Graphs are undirected, unweighted and keep every port as a node.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import networkx as nx
import pandas as pd

from ais_ingest import OdRecord
from config import NetworkConfig
from exposure import ExposureWindow
from shared import log_event, parallel_map

DIFF_COLUMNS = [
    "SID", "PID", "storm_week", "D_normal", "D_cyclone", "C_normal", "C_cyclone", "B_normal", "B_cyclone",
    "Degree_difference", "CC_difference", "BC_difference", "baseline_weeks", "network_flag",
]


@dataclass
class WeeklyGraph:
    week_id: str
    graph: nx.Graph

    @property
    def edges(self) -> List[Tuple[int, int]]:
        return sorted(tuple(sorted(e)) for e in self.graph.edges())


@dataclass
class CentralitySet:
    degree: Dict[int, float] = field(default_factory=dict)
    closeness: Dict[int, float] = field(default_factory=dict)
    betweenness: Dict[int, float] = field(default_factory=dict)


@dataclass(frozen=True)
class NetworkDiff:
    port_id: int
    storm_id: str
    storm_week: str
    d_normal: float
    d_cyclone: float
    c_normal: float
    c_cyclone: float
    b_normal: float
    b_cyclone: float
    degree_difference: float
    cc_difference: float
    bc_difference: float
    weeks_each_side: int = 4
    baseline_weeks: int = 8
    flagged: bool = False


# === CALENDAR ===
def week_id(day: dt.date) -> str:
    year, week, _ = day.isocalendar()
    return f"{year}-W{week:02d}"


def week_start(wid: str) -> dt.date:
    year, week = wid.split("-W")
    return dt.date.fromisocalendar(int(year), int(week), 1)


def week_calendar(start_date: dt.date, end_date: dt.date) -> List[str]:
    monday = start_date - dt.timedelta(days=start_date.weekday())
    weeks = []
    while monday <= end_date:
        weeks.append(week_id(monday))
        monday += dt.timedelta(days=7)
    return weeks


def storm_week(window: ExposureWindow) -> str:
    day = window.closest_time.date() if window.closest_time is not None else window.start_date
    return week_id(day)


# === GRAPHS ===
def calls_from_od(records: Sequence[OdRecord]) -> Dict[str, List[Tuple[int, dt.date, dt.date]]]:
    """Rebuild each vessel's call intervals (port, first day, last day) from its OD chain.

    The first call's arrival and the last call's departure are unknown; they collapse to the leg endpoint.
    """
    by_vessel: Dict[str, List[OdRecord]] = {}
    for r in records:
        by_vessel.setdefault(r.vessel_id, []).append(r)
    calls = {}
    for vid, legs in sorted(by_vessel.items()):
        legs = sorted(legs, key=lambda r: r.depart)
        chain = [(legs[0].origin_port, legs[0].depart.date(), legs[0].depart.date())]
        for prev, nxt in zip(legs, legs[1:]):
            chain.append((prev.dest_port, prev.arrive.date(), nxt.depart.date()))
        chain.append((legs[-1].dest_port, legs[-1].arrive.date(), legs[-1].arrive.date()))
        calls[vid] = chain
    return calls


def build_weekly_graphs(records: Sequence[OdRecord], weeks: Sequence[str],
                        port_ids: Iterable[int]) -> List[WeeklyGraph]:
    nodes = sorted(port_ids)
    wanted = set(weeks)
    ports_by_week: Dict[Tuple[str, str], Set[int]] = {}
    for vid, chain in calls_from_od(records).items():
        for port, first, last in chain:
            monday = first - dt.timedelta(days=first.weekday())
            while monday <= last:
                wid = week_id(monday)
                if wid in wanted:
                    ports_by_week.setdefault((wid, vid), set()).add(port)
                monday += dt.timedelta(days=7)

    graphs = {wid: nx.Graph() for wid in weeks}
    for g in graphs.values():
        g.add_nodes_from(nodes)
    for (wid, _), ports in ports_by_week.items():
        present = sorted(p for p in ports if graphs[wid].has_node(p))
        graphs[wid].add_edges_from(combinations(present, 2))
    return [WeeklyGraph(wid, graphs[wid]) for wid in weeks]


# === CENTRALITY ===
def centralities(graph: nx.Graph) -> CentralitySet:
    """Degree, closeness (Wasserman-Faust, so isolated ports score 0) and normalised betweenness for every node."""
    return CentralitySet(
        degree={v: float(d) for v, d in graph.degree()},
        closeness=nx.closeness_centrality(graph, wf_improved=True),
        betweenness=nx.betweenness_centrality(graph, normalized=True),
    )


def degree(graph: nx.Graph, port: int) -> int:
    return int(graph.degree(port))


def closeness(graph: nx.Graph, port: int) -> float:
    return centralities(graph).closeness[port]


def betweenness(graph: nx.Graph, port: int) -> float:
    return centralities(graph).betweenness[port]


def weekly_centralities(graphs: Sequence[WeeklyGraph], threads: Optional[int] = None) -> Dict[str, CentralitySet]:
    sets = parallel_map(lambda g: centralities(g.graph), graphs, threads)
    return {g.week_id: s for g, s in zip(graphs, sets)}


def baseline_centralities(weekly: Dict[str, CentralitySet], weeks: Sequence[str], storm_wk: str,
                          m: int = 4, skip: Iterable[str] = (),
                          literal_betweenness_mean: bool = False) -> Tuple[CentralitySet, int, bool]:
    """Mean over weeks w-1..w-M and w+1..w+M. Returns (means, weeks used, flagged)."""
    pos = list(weeks).index(storm_wk)
    skip = set(skip)
    around = [pos + k for j in range(1, m + 1) for k in (-j, j)]
    used = [weeks[i] for i in around if 0 <= i < len(weeks) and weeks[i] not in skip]
    flagged = len(used) < 2 * m
    out = CentralitySet()
    if not used:
        return out, 0, True
    nodes = weekly[used[0]].degree.keys()
    # the literal constant divides centrality sums by M instead of 2M
    div = len(used) / 2 if literal_betweenness_mean else len(used)
    for v in nodes:
        out.degree[v] = sum(weekly[w].degree[v] for w in used) / len(used)
        out.closeness[v] = sum(weekly[w].closeness[v] for w in used) / div
        out.betweenness[v] = sum(weekly[w].betweenness[v] for w in used) / div
    return out, len(used), flagged


def network_diff(baseline: CentralitySet, cyclone: CentralitySet, port: int, storm_id: str = "",
                 wk: str = "", m: int = 4, n_weeks: int = 8, flagged: bool = False) -> NetworkDiff:
    d0, d1 = baseline.degree[port], cyclone.degree[port]
    c0, c1 = baseline.closeness[port], cyclone.closeness[port]
    b0, b1 = baseline.betweenness[port], cyclone.betweenness[port]
    return NetworkDiff(port, storm_id, wk, d0, d1, c0, c1, b0, b1,
                       abs(d0 - d1), abs(c0 - c1), abs(b0 - b1), m, n_weeks, flagged)


def _affected_weeks(windows: Sequence[ExposureWindow], port: int, storm_id: str) -> Set[str]:
    weeks = set()
    for w in windows:
        if w.port_id == port and w.storm_id != storm_id:
            weeks.update(week_calendar(w.start_date, w.end_date))
    return weeks


def evaluate_network(graphs: Sequence[WeeklyGraph], windows: Sequence[ExposureWindow],
                     config: Optional[NetworkConfig] = None, threads: Optional[int] = None) -> List[NetworkDiff]:
    cfg = config or NetworkConfig()
    weeks = [g.week_id for g in graphs]
    weekly = weekly_centralities(graphs, threads)
    diffs = []
    for w in sorted(windows, key=lambda w: (w.storm_id, w.port_id)):
        wk = storm_week(w)
        if wk not in weekly or w.port_id not in weekly[wk].degree:
            log_event("network_warning", f"{w.storm_id}/{w.port_id}: week {wk} outside the graph calendar", "netgraph")
            continue
        skip = _affected_weeks(windows, w.port_id, w.storm_id) if cfg.skip_affected_weeks else ()
        base, used, flagged = baseline_centralities(weekly, weeks, wk, cfg.weeks_each_side, skip, cfg.literal_betweenness_mean)
        if flagged:
            log_event("network_flag", f"{w.storm_id}/{w.port_id}: baseline over {used} of "
                      f"{2 * cfg.weeks_each_side} weeks", "netgraph")
        if used == 0:
            continue
        diffs.append(network_diff(base, weekly[wk], w.port_id, w.storm_id, wk, cfg.weeks_each_side, used, flagged))
    return diffs


# === EXPORTS ===
def diffs_frame(diffs: Sequence[NetworkDiff]) -> pd.DataFrame:
    return pd.DataFrame([(d.storm_id, d.port_id, d.storm_week, d.d_normal, d.d_cyclone, d.c_normal, d.c_cyclone,
                          d.b_normal, d.b_cyclone, d.degree_difference, d.cc_difference, d.bc_difference,
                          d.baseline_weeks, int(d.flagged)) for d in diffs], columns=DIFF_COLUMNS)


def graphs_json(graphs: Sequence[WeeklyGraph]) -> List[dict]:
    return [{"week": g.week_id, "edges": [list(e) for e in g.edges]} for g in graphs]


def graph_tables(graphs: Sequence[WeeklyGraph], weekly: Dict[str, CentralitySet],
                 positions: Optional[Dict[int, Tuple[float, float]]] = None) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Node and edge tables for plotting; positions are (lat, lon) per port."""
    positions = positions or {}
    nodes, edges = [], []
    for g in graphs:
        cs = weekly[g.week_id]
        for v in sorted(g.graph.nodes()):
            lat, lon = positions.get(v, (None, None))
            nodes.append((g.week_id, v, lat, lon, cs.degree[v], cs.closeness[v], cs.betweenness[v]))
        edges.extend((g.week_id, a, b) for a, b in g.edges)
    return (pd.DataFrame(nodes, columns=["week", "port_id", "lat", "lon", "degree", "closeness", "betweenness"]),
            pd.DataFrame(edges, columns=["week", "source", "target"]))
