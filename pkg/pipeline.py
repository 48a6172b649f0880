"""
Stage registry, stage runner and the run-all workflow.

Each stage reads config inputs and upstream artifacts from the output
directory, writes its own artifacts atomically and records a
manifest_<stage>.json. run_stage never raises: it returns (rc, message,
detail) the way a tool runner would.
"""
from __future__ import annotations

import datetime as dt
import json
import os
from typing import Callable, Dict, List, Optional, Tuple

import networkx as nx
import numpy as np
import pandas as pd
from langgraph.graph import END, StateGraph

from ais_ingest import (
    build_all_daily_series, calls_date_range, extract_all_od, filter_commercial, load_port_boundaries,
    parse_ais, port_mean_daily_counts, read_daily, read_od, segment_all, write_ingest_tables,
)
from baseline import FORECAST_COLUMNS, fit_all, forecast_frame, model_frame, read_forecasts
from config import PipelineConfig
from countmodel import (
    build_model_matrix, fit, load_fit, predict_and_score, save_fit, split_80_20,
)
from effects import AME_COLUMNS, TRACE_COLUMNS, VIF_COLUMNS, average_marginal_effects, select_model
from exposure import (
    EXPOSURE_COLUMNS, detect_interactions, exposure_frame, join_weather, load_land_polygon,
    load_station_series, load_station_table, parse_tracks, read_exposure, windows_from_frame,
)
from impact import (
    CURVE_COLUMNS, RECORD_COLUMNS, evaluate_all, filter_low_traffic, read_records, records_frame,
    resilience_curve_rows,
)
from netgraph import (
    DIFF_COLUMNS, WeeklyGraph, build_weekly_graphs, diffs_frame, evaluate_network, graph_tables,
    graphs_json, week_calendar, weekly_centralities,
)
from shared import (
    TOOL_VERSION, MissingInputError, NonConvergenceError, PipelineError, PipelineState, ValidationError,
    atomic_write_text, file_sha256, log_event, parallel_map, write_json, write_table,
)

EXCLUDED = "−"
COMPARISON_COLUMNS = ["response", "variant", "fitted_variant", "DIC", "pD", "MAE", "RMSE", "converged",
                      "n_train", "n_test"]
SUMMARY_STATS = ["count", "mean", "std", "min", "25%", "50%", "75%", "max"]


def _out(cfg: PipelineConfig, name: str) -> str:
    return os.path.join(cfg.out_dir, name)


def _read_json(path: str):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


# === STAGES ===
def _ingest(cfg: PipelineConfig) -> List[str]:
    ic = cfg.ingest
    with open(cfg.inputs.ais, "r", encoding="utf-8", newline="") as f:
        points, _ = parse_ais(f, ic.schema_map.model_dump())
    points = filter_commercial(points, ic.commercial_categories)
    ports = load_port_boundaries(cfg.inputs.ports)
    calls = segment_all(points, ports, dt.timedelta(hours=ic.min_dwell_hours),
                        dt.timedelta(hours=ic.max_gap_hours), cfg.threads)
    first, last = calls_date_range(calls)
    start = dt.date.fromisoformat(ic.start_date) if ic.start_date else first
    end = dt.date.fromisoformat(ic.end_date) if ic.end_date else last
    series = build_all_daily_series(calls, [p.port_id for p in ports], start, end, cfg.threads)
    return write_ingest_tables(cfg.out_dir, calls, extract_all_od(calls), series)


def _exposure(cfg: PipelineConfig) -> List[str]:
    ec = cfg.exposure
    ports = load_port_boundaries(cfg.inputs.ports)
    land = load_land_polygon(cfg.inputs.land) if cfg.inputs.land else None
    windows = detect_interactions(parse_tracks(cfg.inputs.tracks), ports, ec.radius_km, ec.step_hours, land,
                                  cfg.threads)
    if cfg.inputs.stations and cfg.inputs.gauges and cfg.inputs.weather:
        stations = load_station_table(cfg.inputs.stations)
        gauges = load_station_series(cfg.inputs.gauges)
        weather = load_station_series(cfg.inputs.weather)
        centroids = {p.port_id: p.centroid() for p in ports}
        summaries = parallel_map(
            lambda w: join_weather(w, centroids[w.port_id], gauges, weather, stations,
                                   ec.station_max_radius_km, ec.typical_sea_level_days),
            windows, cfg.threads)
    else:
        log_event("weather_flag", "no station inputs configured; weather columns left empty", "pipeline")
        summaries = [None] * len(windows)
    path = _out(cfg, "exposure.csv")
    write_table(path, exposure_frame(windows, summaries), EXPOSURE_COLUMNS)
    return [path]


def _baseline(cfg: PipelineConfig) -> List[str]:
    series = read_daily(_out(cfg, "daily_counts.csv"))
    windows = windows_from_frame(read_exposure(_out(cfg, "exposure.csv")))
    models = fit_all(series, windows, cfg.baseline, cfg.threads)
    paths = [_out(cfg, "forecasts.csv"), _out(cfg, "baseline_models.csv")]
    write_table(paths[0], forecast_frame(models, series, windows, cfg.baseline), FORECAST_COLUMNS)
    write_table(paths[1], model_frame(models))
    return paths


def _detect(cfg: PipelineConfig) -> List[str]:
    forecasts = read_forecasts(_out(cfg, "forecasts.csv"))
    windows = windows_from_frame(read_exposure(_out(cfg, "exposure.csv")))
    records = evaluate_all(forecasts, windows, cfg.impact, cfg.baseline, cfg.threads)
    path = _out(cfg, "impact_records.csv")
    write_table(path, records_frame(records), RECORD_COLUMNS)
    return [path]


def _network(cfg: PipelineConfig) -> List[str]:
    series = read_daily(_out(cfg, "daily_counts.csv"))
    od = read_od(_out(cfg, "od_records.csv"))
    windows = windows_from_frame(read_exposure(_out(cfg, "exposure.csv")))
    if not series:
        raise ValidationError("daily_counts.csv holds no ports")
    any_series = next(iter(series.values()))
    weeks = week_calendar(any_series.start_date, any_series.end_date)
    graphs = build_weekly_graphs(od, weeks, series.keys())
    diffs = evaluate_network(graphs, windows, cfg.network, cfg.threads)
    paths = [_out(cfg, "network_diffs.csv"), _out(cfg, "weekly_graphs.json")]
    write_table(paths[0], diffs_frame(diffs), DIFF_COLUMNS)
    write_json(paths[1], graphs_json(graphs))
    return paths


def join_interactions(cfg: PipelineConfig) -> pd.DataFrame:
    """Impact records joined with exposure, network differences and the census table, low-traffic ports removed."""
    series = read_daily(_out(cfg, "daily_counts.csv"))
    records = read_records(_out(cfg, "impact_records.csv"))
    kept = filter_low_traffic(records, port_mean_daily_counts(series), cfg.impact.traffic_threshold)
    keys = {(r.storm_id, r.port_id) for r in kept}

    df = pd.read_csv(_out(cfg, "impact_records.csv"), dtype={"SID": str})
    df = df[[(s, p) in keys for s, p in zip(df["SID"], df["PID"])]]
    exposure = read_exposure(_out(cfg, "exposure.csv")).drop(columns=["start_date", "end_date"])
    diffs = pd.read_csv(_out(cfg, "network_diffs.csv"), dtype={"SID": str})
    df = df.merge(exposure, on=["SID", "PID"], how="left").merge(diffs, on=["SID", "PID"], how="left")
    census = pd.read_csv(cfg.inputs.census).rename(columns={"port_id": "PID"})
    df = df.merge(census, on="PID", how="left")
    return df.sort_values(["SID", "PID"], kind="mergesort").reset_index(drop=True)


def _model_data(cfg: PipelineConfig, joined: pd.DataFrame, response: str):
    data = build_model_matrix(joined, response, cfg.model.covariates)
    return data, *split_80_20(data, cfg.model.split_seed, cfg.model.train_fraction)


def _fit_response(cfg: PipelineConfig, joined: pd.DataFrame, response: str, paths: List[str]) -> Dict[str, dict]:
    fits_dir = _out(cfg, "fits")
    data, train, test = _model_data(cfg, joined, response)
    results = {}
    for variant in cfg.model.variants:
        spec, vif_table, trace = select_model(train, variant, cfg.model, cfg.effects, cfg.seed, cfg.threads)
        prefix = os.path.join(fits_dir, f"{response}_{variant}")
        write_table(f"{prefix}_vif.csv", vif_table, VIF_COLUMNS)
        write_table(f"{prefix}_selection.csv", trace, TRACE_COLUMNS)
        result = fit(spec, train, cfg.model.mcmc, cfg.seed, cfg.threads)
        mae, rmse = predict_and_score(result, test)
        paths += save_fit(result, data.kinds, prefix)
        paths += [f"{prefix}_vif.csv", f"{prefix}_selection.csv"]
        results[variant] = {
            "prefix": os.path.relpath(prefix, cfg.out_dir), "fitted_variant": spec.variant,
            "covariates": list(spec.covariates), "random": list(spec.random),
            "DIC": result.dic, "pD": result.p_d, "MAE": mae, "RMSE": rmse,
            "converged": result.converged, "n_train": len(train), "n_test": len(test),
        }
    return results


def _fit(cfg: PipelineConfig) -> List[str]:
    paths = [_out(cfg, "interaction_records.csv")]
    write_table(paths[0], join_interactions(cfg))
    # model on the written table so later stages see identical values
    joined = pd.read_csv(paths[0], dtype={"SID": str})
    index: Dict[str, dict] = {}
    for response in cfg.model.responses:
        try:
            index[response] = _fit_response(cfg, joined, response, paths)
        except ValidationError as e:
            log_event("fit_error", f"{response}: {e}", "pipeline")
            index[response] = {"error": str(e)}
    if all("error" in v for v in index.values()):
        raise ValidationError("no response could be fitted")
    paths.append(_out(cfg, "model_fits.json"))
    write_json(paths[-1], index)
    return paths


def best_variant(fits: Dict[str, dict]) -> Optional[str]:
    """Lowest-DIC variant, converged fits first."""
    if not fits or "error" in fits:
        return None
    return min(fits, key=lambda v: (not fits[v]["converged"], fits[v]["DIC"]))


def _effects(cfg: PipelineConfig) -> List[str]:
    index = _read_json(_out(cfg, "model_fits.json"))
    joined = pd.read_csv(_out(cfg, "interaction_records.csv"), dtype={"SID": str})
    ec = cfg.effects
    summary, paths = {}, []
    for response, fits in index.items():
        variant = best_variant(fits)
        if variant is None:
            summary[response] = {"error": fits.get("error", "no fits")}
            continue
        result, kinds = load_fit(os.path.join(cfg.out_dir, fits[variant]["prefix"]))
        if not result.converged:
            log_event("effects_warning", f"{response}/{variant}: marginal effects from a non-converged fit", "pipeline")
        _, _, test = _model_data(cfg, joined, response)
        report = average_marginal_effects(result, test, kinds, ec.halton_draws, ec.halton_skip, ec.full_posterior)
        path = _out(cfg, f"ame_{response}.csv")
        write_table(path, report.to_table(), AME_COLUMNS)
        paths.append(path)
        summary[response] = {"variant": variant, "converged": result.converged, "n_test": len(test),
                             "draws": report.n_draws, "primes": report.primes}
    paths.append(_out(cfg, "effects.json"))
    write_json(paths[-1], summary)
    return paths


# === REPORT ===
def _cell(row: pd.Series) -> str:
    return f"{row['mean']:.4g} [{row['q2.5']:.4g}, {row['q97.5']:.4g}]"


def coefficient_table(cfg: PipelineConfig, index: Dict[str, dict]) -> pd.DataFrame:
    """One row per parameter, one column per response/variant; excluded variables shown as a minus sign."""
    params = ["Constant", *cfg.model.covariates, *[f"sd:{r}" for r in cfg.model.random_candidates], "phi", "psi"]
    table = pd.DataFrame({"parameter": params})
    for response, fits in index.items():
        if "error" in fits:
            continue
        for variant, meta in fits.items():
            summary = pd.read_csv(os.path.join(cfg.out_dir, meta["prefix"]) + "_summary.csv").set_index("parameter")
            table[f"{response}:{variant}"] = [_cell(summary.loc[p]) if p in summary.index else EXCLUDED
                                              for p in params]
    return table


def comparison_table(index: Dict[str, dict]) -> pd.DataFrame:
    rows = []
    for response, fits in index.items():
        if "error" in fits:
            continue
        for variant, m in fits.items():
            rows.append((response, variant, m["fitted_variant"], m["DIC"], m["pD"], m["MAE"], m["RMSE"],
                         int(m["converged"]), m["n_train"], m["n_test"]))
    return pd.DataFrame(rows, columns=COMPARISON_COLUMNS)


def interaction_summary(joined: pd.DataFrame) -> pd.DataFrame:
    """Descriptive statistics of every numeric column of the joined interaction records."""
    numeric = joined.drop(columns=["ID", "PID"], errors="ignore").select_dtypes(include="number")
    if numeric.empty:
        return pd.DataFrame(columns=["variable", *SUMMARY_STATS])
    return numeric.describe().T.rename_axis("variable").reset_index()


def curve_table(cfg: PipelineConfig) -> pd.DataFrame:
    forecasts = read_forecasts(_out(cfg, "forecasts.csv"))
    windows = {(w.storm_id, w.port_id): w for w in windows_from_frame(read_exposure(_out(cfg, "exposure.csv")))}
    pads = (dt.timedelta(days=cfg.baseline.pad_before), dt.timedelta(days=cfg.baseline.pad_after))
    frames = []
    for r in read_records(_out(cfg, "impact_records.csv")):
        w = windows.get((r.storm_id, r.port_id))
        if not r.has_impact or w is None or r.port_id not in forecasts:
            continue
        series, forecast = forecasts[r.port_id]
        frames.append(resilience_curve_rows(series, forecast, r, (w.start_date - pads[0], w.end_date + pads[1])))
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=CURVE_COLUMNS)


def graph_plot_tables(cfg: PipelineConfig) -> Tuple[pd.DataFrame, pd.DataFrame]:
    series = read_daily(_out(cfg, "daily_counts.csv"))
    graphs = []
    for entry in _read_json(_out(cfg, "weekly_graphs.json")):
        g = nx.Graph()
        g.add_nodes_from(sorted(series))
        g.add_edges_from(tuple(e) for e in entry["edges"])
        graphs.append(WeeklyGraph(entry["week"], g))
    positions = {}
    if cfg.inputs.ports and os.path.exists(cfg.inputs.ports):
        positions = {p.port_id: p.centroid() for p in load_port_boundaries(cfg.inputs.ports)}
    weekly = weekly_centralities(graphs, cfg.threads)
    return graph_tables(graphs, weekly, positions)


def _fmt(value) -> str:
    return f"{value:.4g}" if isinstance(value, (float, np.floating)) else str(value)


def _markdown(df: pd.DataFrame) -> List[str]:
    lines = ["| " + " | ".join(df.columns) + " |", "|" + "---|" * len(df.columns)]
    lines += ["| " + " | ".join(_fmt(v) for v in row) + " |" for row in df.itertuples(index=False)]
    return lines


def render_report(cfg: PipelineConfig, index: Dict[str, dict], effects: Dict[str, dict]) -> str:
    lines = ["# Port resilience report", "", f"Seed {cfg.seed}, config {cfg.config_hash()[:12]}, "
             f"version {TOOL_VERSION}.", ""]
    for response in cfg.model.responses:
        fits = index.get(response)
        lines += [f"## {response}", ""]
        if fits is None or "error" in fits:
            lines += [f"No fit available: {fits.get('error') if fits else 'not run'}.", ""]
            continue
        for variant, m in fits.items():
            stamp = "" if m["converged"] else " **NON-CONVERGED**"
            lines.append(f"- {variant} (fitted as {m['fitted_variant']}): DIC {m['DIC']:.2f}, MAE {m['MAE']:.3f}, "
                         f"RMSE {m['RMSE']:.3f}, covariates {', '.join(m['covariates']) or 'none'}{stamp}")
        lines.append("")
        eff = effects.get(response, {})
        ame_path = _out(cfg, f"ame_{response}.csv")
        if "variant" in eff and os.path.exists(ame_path):
            stamp = "" if eff["converged"] else " **NON-CONVERGED**"
            lines += [f"Average marginal effects ({eff['variant']}, {eff['n_test']} test records){stamp}:", ""]
            lines += _markdown(pd.read_csv(ame_path))
        else:
            lines.append(f"Marginal effects unavailable: {eff.get('error', 'not computed')}.")
        lines.append("")
    return "\n".join(lines) + "\n"


def _report(cfg: PipelineConfig) -> List[str]:
    index = _read_json(_out(cfg, "model_fits.json"))
    eff_path = _out(cfg, "effects.json")
    effects = _read_json(eff_path) if os.path.exists(eff_path) else {}
    paths = [_out(cfg, n) for n in ("model_comparison.csv", "coefficients.csv", "resilience_curves.csv",
                                    "graph_nodes.csv", "graph_edges.csv", "interaction_summary.csv", "report.md")]
    write_table(paths[0], comparison_table(index), COMPARISON_COLUMNS)
    write_table(paths[1], coefficient_table(cfg, index))
    write_table(paths[2], curve_table(cfg), CURVE_COLUMNS)
    nodes, edges = graph_plot_tables(cfg)
    write_table(paths[3], nodes)
    write_table(paths[4], edges)
    joined = pd.read_csv(_out(cfg, "interaction_records.csv"), dtype={"SID": str})
    write_table(paths[5], interaction_summary(joined))
    atomic_write_text(paths[6], render_report(cfg, index, effects))
    return paths


def emit_report(cfg: PipelineConfig) -> List[str]:
    return _report(cfg)


# === REGISTRY ===
STAGES: Dict[str, dict] = {
    "ingest": {"inputs": ["ais", "ports"], "needs": [], "run": _ingest},
    "exposure": {"inputs": ["tracks", "ports"], "optional": ["land", "stations", "gauges", "weather"],
                 "needs": [], "run": _exposure},
    "baseline": {"inputs": [], "needs": ["daily_counts.csv", "exposure.csv"], "run": _baseline},
    "detect": {"inputs": [], "needs": ["forecasts.csv", "exposure.csv"], "run": _detect},
    "network": {"inputs": [], "needs": ["od_records.csv", "daily_counts.csv", "exposure.csv"], "run": _network},
    "fit": {"inputs": ["census"], "needs": ["daily_counts.csv", "impact_records.csv", "exposure.csv",
                                            "network_diffs.csv"], "run": _fit},
    "effects": {"inputs": [], "needs": ["model_fits.json", "interaction_records.csv"], "run": _effects},
    "report": {"inputs": [], "optional": ["ports"],
               "needs": ["model_fits.json", "forecasts.csv", "impact_records.csv", "exposure.csv",
                         "daily_counts.csv", "weekly_graphs.json", "interaction_records.csv"], "run": _report},
}
STAGE_ORDER = list(STAGES)


def _check_stage(name: str, cfg: PipelineConfig) -> List[str]:
    stage = STAGES[name]
    cfg.check_inputs(stage["inputs"])
    given = [n for n in stage.get("optional", []) if getattr(cfg.inputs, n)]
    cfg.check_inputs(given)
    needed = [_out(cfg, n) for n in stage["needs"]]
    for path in needed:
        if not os.path.exists(path):
            raise MissingInputError(f"missing upstream artifact: {path}")
    return [getattr(cfg.inputs, n) for n in stage["inputs"] + given] + needed


def write_manifest(name: str, cfg: PipelineConfig, inputs: List[str], outputs: List[str]) -> str:
    path = _out(cfg, f"manifest_{name}.json")
    write_json(path, {
        "stage": name, "version": TOOL_VERSION, "seed": cfg.seed, "config_hash": cfg.config_hash(),
        "inputs": {os.path.basename(p): file_sha256(p) for p in inputs},
        "outputs": {os.path.relpath(p, cfg.out_dir): file_sha256(p) for p in outputs},
    })
    return path


def run_stage(name: str, cfg: PipelineConfig, strict: bool = False) -> Tuple[int, str, List[str]]:
    """(exit code, message, written paths). Exceptions are logged and mapped to exit codes."""
    if name not in STAGES:
        return (PipelineError.exit_code, f"DENIED: unknown stage '{name}'", [])
    try:
        inputs = _check_stage(name, cfg)
        os.makedirs(cfg.out_dir, exist_ok=True)
        log_event("stage", f"{name} started", "pipeline")
        outputs = STAGES[name]["run"](cfg)
        outputs.append(write_manifest(name, cfg, inputs, outputs))
        if strict and name == "fit":
            index = _read_json(_out(cfg, "model_fits.json"))
            bad = [f"{r}/{v}" for r, fits in index.items() if "error" not in fits
                   for v, m in fits.items() if not m["converged"]]
            if bad:
                raise NonConvergenceError(f"non-converged fits: {', '.join(bad)}")
        log_event("stage", f"{name} finished, {len(outputs)} artifact(s)", "pipeline")
        return (0, "OK", outputs)
    except PipelineError as e:
        log_event("stage_error", f"{name}: {e}", "pipeline")
        return (e.exit_code, str(e), [])
    except Exception as e:
        log_event("stage_error", f"{name}: {type(e).__name__}: {e}", "pipeline")
        return (PipelineError.exit_code, f"{type(e).__name__}: {e}", [])


# === WORKFLOW ===
def build_workflow(cfg: PipelineConfig, strict: bool = False, stages: Optional[List[str]] = None):
    stages = stages or STAGE_ORDER

    def make_node(name: str) -> Callable[[PipelineState], dict]:
        def node(state: PipelineState) -> dict:
            rc, message, paths = run_stage(name, cfg, strict)
            artifacts = dict(state["artifacts"])
            artifacts[name] = [os.path.relpath(p, cfg.out_dir) for p in paths]
            return {"current": name, "rc": rc, "message": message, "artifacts": artifacts,
                    "completed": state["completed"] + ([name] if rc == 0 else [])}
        return node

    def should_continue(state: PipelineState) -> str:
        return "next" if state["rc"] == 0 else "stop"

    workflow = StateGraph(PipelineState)
    for name in stages:
        workflow.add_node(name, make_node(name))
    workflow.set_entry_point(stages[0])
    for name, nxt in zip(stages, stages[1:]):
        workflow.add_conditional_edges(name, should_continue, {"next": nxt, "stop": END})
    workflow.add_edge(stages[-1], END)
    return workflow.compile()


def run_all(cfg: PipelineConfig, strict: bool = False) -> PipelineState:
    graph = build_workflow(cfg, strict)
    initial = PipelineState(stages=list(STAGE_ORDER), completed=[], current=None, rc=0, message="",
                            artifacts={})
    final = graph.invoke(initial)
    log_event("run_all", f"completed {len(final['completed'])}/{len(STAGE_ORDER)} stage(s), rc={final['rc']}",
              "pipeline")
    return final
