import datetime as dt
import itertools

import networkx as nx
import pandas as pd
import pytest
from hypothesis import given, strategies as st

from ais_ingest import OdRecord
from config import NetworkConfig
from exposure import ExposureWindow
from netgraph import (
    DIFF_COLUMNS, CentralitySet, WeeklyGraph, baseline_centralities, betweenness, build_weekly_graphs,
    centralities, closeness, degree, diffs_frame, evaluate_network, graph_tables, graphs_json, network_diff,
    storm_week, week_calendar, week_id, week_start,
)

MONDAY = dt.date(2022, 9, 5)


def ts(day, hour=12):
    return pd.Timestamp(dt.datetime(day.year, day.month, day.day, hour), tz="UTC")


def leg(vid, a, b, depart, arrive=None):
    arrive = arrive or depart + dt.timedelta(days=1)
    return OdRecord(vid, a, b, ts(depart), ts(arrive), self_loop=a == b)


def graph_of(edges, nodes=range(1, 5)):
    g = nx.Graph()
    g.add_nodes_from(nodes)
    g.add_edges_from(edges)
    return g


@st.composite
def small_graphs(draw):
    n = draw(st.integers(1, 8))
    pairs = list(itertools.combinations(range(n), 2))
    mask = draw(st.lists(st.booleans(), min_size=len(pairs), max_size=len(pairs)))
    return graph_of([p for p, keep in zip(pairs, mask) if keep], range(n))


def brute_force_betweenness(g):
    n = g.number_of_nodes()
    out = dict.fromkeys(g, 0.0)
    for s, t in itertools.permutations(g, 2):
        if not nx.has_path(g, s, t):
            continue
        paths = list(nx.all_shortest_paths(g, s, t))
        for v in g:
            if v not in (s, t):
                out[v] += sum(v in p for p in paths) / len(paths)
    scale = 1.0 / ((n - 1) * (n - 2)) if n > 2 else 0.0
    return {v: b * scale for v, b in out.items()}


# === CALENDAR ===
def test_week_ids():
    assert week_id(MONDAY) == week_id(MONDAY + dt.timedelta(days=6))
    assert week_id(MONDAY) != week_id(MONDAY + dt.timedelta(days=7))
    assert week_start(week_id(MONDAY + dt.timedelta(days=3))) == MONDAY
    assert week_id(dt.date(2021, 1, 1)) == "2020-W53"
    assert len(week_calendar(MONDAY, MONDAY + dt.timedelta(days=20))) == 3


def test_storm_week_prefers_closest_approach():
    w = ExposureWindow(1, "S", MONDAY, MONDAY + dt.timedelta(days=10), 10.0, 1,
                       closest_time=ts(MONDAY + dt.timedelta(days=8)))
    assert storm_week(w) == week_id(MONDAY + dt.timedelta(days=7))
    assert storm_week(ExposureWindow(1, "S", MONDAY, MONDAY, 10.0, 1)) == week_id(MONDAY)


# === GRAPHS ===
def test_one_vessel_two_ports_gives_edge():
    g = build_weekly_graphs([leg("V1", 1, 2, MONDAY)], [week_id(MONDAY)], [1, 2, 3])[0]
    assert g.edges == [(1, 2)]
    assert sorted(g.graph.nodes()) == [1, 2, 3]


def test_self_loop_adds_no_edge():
    g = build_weekly_graphs([leg("V1", 1, 1, MONDAY)], [week_id(MONDAY)], [1, 2])[0]
    assert g.edges == []


def test_two_vessels_share_a_hub():
    records = [leg("V1", 1, 2, MONDAY), leg("V2", 2, 3, MONDAY + dt.timedelta(days=2))]
    g = build_weekly_graphs(records, [week_id(MONDAY)], [1, 2, 3, 4])[0]
    assert g.edges == [(1, 2), (2, 3)]
    assert degree(g.graph, 2) == 2
    assert degree(g.graph, 4) == 0


def test_long_call_links_ports_across_weeks():
    # vessel arrives at 2 in week one and leaves for 3 in week three
    records = [leg("V1", 1, 2, MONDAY, MONDAY + dt.timedelta(days=1)),
               leg("V1", 2, 3, MONDAY + dt.timedelta(days=15), MONDAY + dt.timedelta(days=16))]
    weeks = week_calendar(MONDAY, MONDAY + dt.timedelta(days=20))
    graphs = build_weekly_graphs(records, weeks, [1, 2, 3])
    assert [g.edges for g in graphs] == [[(1, 2)], [], [(2, 3)]]
    assert all(sorted(g.graph.nodes()) == [1, 2, 3] for g in graphs)


# === CENTRALITY ===
def test_degree_examples():
    assert degree(graph_of([]), 1) == 0
    assert degree(graph_of([(1, 2), (1, 3), (1, 4)]), 1) == 3
    assert degree(nx.complete_graph(5), 0) == 4


def test_path_closeness():
    p3 = graph_of([(1, 2), (2, 3)], [1, 2, 3])
    assert closeness(p3, 2) == pytest.approx(1.0)
    assert closeness(p3, 1) == pytest.approx(2 / 3)
    assert closeness(graph_of([(1, 2)], [1, 2, 3]), 3) == 0.0


def test_star_and_path_betweenness():
    star = graph_of([(1, 2), (1, 3), (1, 4)])
    assert betweenness(star, 1) == pytest.approx(1.0)
    assert betweenness(star, 2) == 0.0
    assert betweenness(graph_of([(1, 2), (2, 3)], [1, 2, 3]), 2) == pytest.approx(1.0)


@given(small_graphs())
def test_centralities_match_networkx_and_enumeration(g):
    cs = centralities(g)
    expected_b = brute_force_betweenness(g)
    expected_c = nx.closeness_centrality(g, wf_improved=True)
    for v in g:
        assert cs.betweenness[v] == pytest.approx(expected_b[v], abs=1e-9)
        assert cs.closeness[v] == pytest.approx(expected_c[v], abs=1e-9)
        assert 0.0 <= cs.betweenness[v] <= 1.0 + 1e-12
        if g.degree(v) == 0:
            assert cs.betweenness[v] == 0.0 and cs.closeness[v] == 0.0
    assert sum(cs.degree.values()) == 2 * g.number_of_edges()


# === BASELINE & DIFF ===
def cset(degree=None, closeness=None, betweenness=None):
    return CentralitySet(degree or {1: 0.0}, closeness or {1: 0.0}, betweenness or {1: 0.0})


def test_identical_weeks_give_single_week_baseline():
    weeks = [f"W{i}" for i in range(9)]
    one = centralities(graph_of([(1, 2), (2, 3)]))
    base, used, flagged = baseline_centralities({w: one for w in weeks}, weeks, "W4")
    assert (used, flagged) == (8, False)
    assert base.degree == one.degree
    assert base.closeness == pytest.approx(one.closeness)
    assert base.betweenness == pytest.approx(one.betweenness)


def test_baseline_means_and_literal_divisor():
    weeks = [f"W{i}" for i in range(9)]
    weekly = {w: cset({1: 4.0 if i < 4 else 6.0}, {1: 0.5}, {1: 0.2}) for i, w in enumerate(weeks)}
    base, _, _ = baseline_centralities(weekly, weeks, "W4")
    assert base.degree[1] == pytest.approx(5.0)
    literal, _, _ = baseline_centralities(weekly, weeks, "W4", literal_betweenness_mean=True)
    assert literal.degree[1] == pytest.approx(5.0)
    assert literal.betweenness[1] == pytest.approx(2 * base.betweenness[1])
    assert literal.closeness[1] == pytest.approx(2 * base.closeness[1])


def test_two_week_closeness_mean():
    weekly = {"A": cset(closeness={1: 1.0}), "B": cset(closeness={1: 0.1}), "C": cset(closeness={1: 0.5})}
    base, used, _ = baseline_centralities(weekly, ["A", "B", "C"], "B", m=1)
    assert used == 2
    assert base.closeness[1] == pytest.approx(0.75)


def test_baseline_ignores_storm_week_content():
    weeks = [f"W{i}" for i in range(9)]
    weekly = {w: cset({1: float(i)}) for i, w in enumerate(weeks)}
    a, _, _ = baseline_centralities(weekly, weeks, "W4")
    weekly["W4"] = cset({1: 100.0})
    b, _, _ = baseline_centralities(weekly, weeks, "W4")
    assert a.degree == b.degree


def test_dataset_edge_is_flagged():
    weeks = [f"W{i}" for i in range(5)]
    weekly = {w: cset() for w in weeks}
    _, used, flagged = baseline_centralities(weekly, weeks, "W1")
    assert (used, flagged) == (4, True)


@pytest.mark.parametrize("d0, d1, expected", [(3.0, 3.0, 0.0), (5.0, 1.0, 4.0), (3.0, 5.0, 2.0)])
def test_degree_difference_is_absolute(d0, d1, expected):
    assert network_diff(cset({1: d0}), cset({1: d1}), 1).degree_difference == expected


# === EVALUATION ===
def test_evaluate_network_end_to_end(caplog):
    weeks = week_calendar(MONDAY, MONDAY + dt.timedelta(days=62))
    k4 = [(a, b) for a, b in itertools.combinations(range(1, 5), 2)]
    graphs = [WeeklyGraph(w, graph_of([(2, 3), (3, 4), (2, 4)] if i == 4 else k4)) for i, w in enumerate(weeks)]
    storm_day = week_start(weeks[4]) + dt.timedelta(days=2)
    windows = [
        ExposureWindow(1, "S1", storm_day, storm_day, 20.0, 3, closest_time=ts(storm_day)),
        ExposureWindow(2, "S2", week_start(weeks[1]), week_start(weeks[1]), 20.0, 1),
        ExposureWindow(3, "S3", dt.date(2030, 1, 1), dt.date(2030, 1, 2), 20.0, 1),
    ]
    diffs = evaluate_network(graphs, windows, NetworkConfig(weeks_each_side=4), threads=2)
    assert [(d.storm_id, d.port_id) for d in diffs] == [("S1", 1), ("S2", 2)]

    hit = diffs[0]
    assert (hit.d_normal, hit.d_cyclone, hit.degree_difference) == (3.0, 0.0, 3.0)
    assert hit.cc_difference == pytest.approx(1.0)
    assert hit.bc_difference == pytest.approx(0.0)
    assert (hit.baseline_weeks, hit.flagged) == (8, False)

    edge = diffs[1]
    assert (edge.baseline_weeks, edge.flagged) == (5, True)
    assert "NETWORK_FLAG" in caplog.text
    assert "NETWORK_WARNING" in caplog.text

    df = diffs_frame(diffs)
    assert list(df.columns) == DIFF_COLUMNS
    assert df["network_flag"].tolist() == [0, 1]


def test_skip_affected_weeks_drops_other_storms():
    weeks = week_calendar(MONDAY, MONDAY + dt.timedelta(days=62))
    graphs = [WeeklyGraph(w, graph_of([(1, 2)])) for w in weeks]
    here = week_start(weeks[4])
    other = week_start(weeks[5])
    windows = [ExposureWindow(1, "S1", here, here, 20.0, 3), ExposureWindow(1, "S2", other, other, 20.0, 1)]
    diffs = evaluate_network(graphs, windows, NetworkConfig(skip_affected_weeks=True))
    by_storm = {d.storm_id: d for d in diffs}
    assert by_storm["S1"].baseline_weeks == 7
    assert by_storm["S2"].baseline_weeks == 6


def test_exports():
    weeks = week_calendar(MONDAY, MONDAY + dt.timedelta(days=13))
    graphs = [WeeklyGraph(weeks[0], graph_of([(2, 1)])), WeeklyGraph(weeks[1], graph_of([]))]
    assert graphs_json(graphs) == [{"week": weeks[0], "edges": [[1, 2]]}, {"week": weeks[1], "edges": []}]
    weekly = {g.week_id: centralities(g.graph) for g in graphs}
    nodes, edges = graph_tables(graphs, weekly, {1: (29.7, -95.0)})
    assert len(nodes) == 8
    assert nodes.loc[nodes["port_id"] == 1, "lat"].iloc[0] == 29.7
    assert edges.to_dict("records") == [{"week": weeks[0], "source": 1, "target": 2}]


def test_centralities_on_larger_graph_with_isolated_port():
    g = nx.gnp_random_graph(12, 0.3, seed=4)
    g.add_node(12)
    n = g.number_of_nodes()
    cs = centralities(g)
    expected_b = brute_force_betweenness(g)
    for v in g:
        dist = nx.single_source_shortest_path_length(g, v)
        reach, total = len(dist), sum(dist.values())
        expected_c = (reach - 1) ** 2 / (total * (n - 1)) if total else 0.0
        assert cs.closeness[v] == pytest.approx(expected_c, abs=1e-12)
        assert cs.betweenness[v] == pytest.approx(expected_b[v], abs=1e-12)
    assert cs.closeness[12] == 0.0 and cs.betweenness[12] == 0.0 and cs.degree[12] == 0.0
