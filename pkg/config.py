"""
Pipeline configuration: pydantic models loaded from a JSON file, with
environment overrides (.env is read by shared.py) and CLI overrides on top.
"""
from __future__ import annotations

import os
import json
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field, model_validator
from pydantic import ValidationError as PydanticValidationError

from shared import MissingInputError, ValidationError, text_sha256, PACKAGE_DIR

DEFAULT_CONFIG_PATH = os.path.join(PACKAGE_DIR, "default_config.json")


class InputPaths(BaseModel):
    ais: Optional[str] = None
    ports: Optional[str] = None
    tracks: Optional[str] = None
    gauges: Optional[str] = None
    weather: Optional[str] = None
    stations: Optional[str] = None
    land: Optional[str] = None
    census: Optional[str] = None


class AisSchema(BaseModel):
    vessel_id: str = "MMSI"
    timestamp: str = "BaseDateTime"
    lat: str = "LAT"
    lon: str = "LON"
    vessel_type: str = "VesselType"


class IngestConfig(BaseModel):
    schema_map: AisSchema = Field(default_factory=AisSchema, alias="schema")
    commercial_categories: List[str] = ["cargo", "tanker"]
    min_dwell_hours: float = Field(4.0, gt=0, le=72)
    max_gap_hours: float = Field(24.0, gt=0)
    start_date: Optional[str] = None
    end_date: Optional[str] = None

    model_config = {"populate_by_name": True}


class ExposureConfig(BaseModel):
    radius_km: float = Field(500.0, gt=0, le=5000)
    step_hours: float = Field(1.0, gt=0, le=6)
    station_max_radius_km: float = Field(100.0, gt=0)
    typical_sea_level_days: int = Field(30, ge=1)


class BaselineConfig(BaseModel):
    pad_before: int = Field(10, ge=0)
    pad_after: int = Field(10, ge=0)
    fourier_weekly_order: int = Field(3, ge=1, le=3)
    fourier_yearly_order: int = Field(10, ge=1, le=30)
    n_changepoints: int = Field(25, ge=0)
    changepoint_range: float = Field(0.8, gt=0, le=1)
    penalty_grid: List[float] = [0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0]
    cv_folds: int = Field(5, ge=2)
    ci_level: float = Field(0.95, gt=0, lt=1)
    min_history_days: int = Field(730, ge=0)


class ImpactConfig(BaseModel):
    gap_merge: int = Field(2, ge=0)
    clamp_nonnegative: bool = False
    traffic_threshold: float = Field(5.0, ge=0)


class NetworkConfig(BaseModel):
    weeks_each_side: int = Field(4, ge=1, le=26)
    literal_betweenness_mean: bool = False
    skip_affected_weeks: bool = False


class PriorConfig(BaseModel):
    beta_sd: float = Field(10.0, gt=0)
    sigma_scale: float = Field(1.0, gt=0)
    phi_shape: float = Field(0.5, gt=0)
    phi_rate: float = Field(0.05, gt=0)
    psi_shape: float = Field(0.5, gt=0)
    psi_rate: float = Field(0.05, gt=0)


class McmcConfig(BaseModel):
    chains: int = Field(2, ge=2)
    iterations: int = Field(20000, ge=20)
    burn_in: int = Field(10000, ge=10)
    thin: int = Field(1, ge=1)
    target_accept: float = Field(0.30, gt=0, lt=1)
    adapt_window: int = Field(50, ge=10)
    max_iterations: int = Field(40000, ge=20)
    rhat_threshold: float = Field(1.1, gt=1)

    @model_validator(mode="after")
    def _check_budget(self):
        if self.burn_in >= self.iterations:
            raise ValueError("burn_in must be smaller than iterations")
        if self.max_iterations < self.iterations:
            raise ValueError("max_iterations must be >= iterations")
        return self


class ModelConfig(BaseModel):
    responses: List[str] = ["total_impact", "day_of_recover", "Degree_difference"]
    variants: List[Literal["NB", "NBL", "RPNBL"]] = ["NB", "NBL", "RPNBL"]
    covariates: Dict[str, Literal["continuous", "indicator"]] = {
        "SSHS_1": "indicator", "SSHS_2": "indicator", "SSHS_3": "indicator",
        "SSHS_4": "indicator", "SSHS_5": "indicator",
        "Wind_speed": "continuous", "Rainfall": "continuous",
        "Surge_height": "continuous", "DISTANCE": "continuous",
        "Coast_Atlantic": "indicator", "Coast_Pacific": "indicator",
        "Coast_Gulf_of_Mexico": "indicator",
        "Ln_Pop_C": "continuous", "WF": "indicator", "PCT_Pov": "continuous",
        "PCT_TI": "indicator", "PCT_TA": "indicator",
        "Dock_Count": "continuous", "Railway_Length": "continuous",
        "Highway_Length": "continuous",
        "D_normal": "continuous", "C_normal": "continuous", "B_normal": "continuous",
    }
    random_candidates: List[str] = ["Wind_speed", "Surge_height", "Rainfall", "DISTANCE"]
    literal_mixing_weight: bool = False
    split_seed: int = 2024
    train_fraction: float = Field(0.8, gt=0, lt=1)
    priors: PriorConfig = Field(default_factory=PriorConfig)
    mcmc: McmcConfig = Field(default_factory=McmcConfig)


class EffectsConfig(BaseModel):
    vif_threshold: float = Field(5.0, gt=1)
    dic_improvement: float = Field(2.0, ge=0)
    halton_draws: int = Field(200, ge=1)
    halton_skip: int = Field(20, ge=0)
    full_posterior: bool = False
    stepwise_mcmc: McmcConfig = Field(default_factory=lambda: McmcConfig(
        chains=2, iterations=4000, burn_in=2000, max_iterations=4000))
    run_stepwise: bool = True


class PipelineConfig(BaseModel):
    inputs: InputPaths = Field(default_factory=InputPaths)
    out_dir: str = "out"
    seed: int = 20240601
    threads: int = Field(1, ge=1, le=256)
    ingest: IngestConfig = Field(default_factory=IngestConfig)
    exposure: ExposureConfig = Field(default_factory=ExposureConfig)
    baseline: BaselineConfig = Field(default_factory=BaselineConfig)
    impact: ImpactConfig = Field(default_factory=ImpactConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    effects: EffectsConfig = Field(default_factory=EffectsConfig)

    def config_hash(self) -> str:
        # threads never changes results, so it stays out of the hash
        payload = self.model_dump(mode="json", by_alias=True, exclude={"threads", "out_dir"})
        return text_sha256(json.dumps(payload, sort_keys=True))

    def check_inputs(self, names: List[str]):
        for name in names:
            path = getattr(self.inputs, name)
            if not path:
                raise ValidationError(f"config inputs.{name} is not set")
            if not os.path.exists(path):
                raise MissingInputError(f"missing input: {path}")


def _resolve_paths(cfg: PipelineConfig, base_dir: str) -> PipelineConfig:
    for name, value in cfg.inputs.model_dump().items():
        if value and not os.path.isabs(value):
            setattr(cfg.inputs, name, os.path.normpath(os.path.join(base_dir, value)))
    return cfg


def _read_json_config(path: str) -> dict:
    if not os.path.exists(path):
        raise MissingInputError(f"missing config file: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ValidationError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ValidationError(f"config {path} must hold a JSON object")
    return raw


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> PipelineConfig:
    """Layer default_config.json, a user JSON config, env then explicit overrides, and validate."""
    raw = _read_json_config(DEFAULT_CONFIG_PATH)
    base_dir = os.getcwd()
    if path:
        raw = _merge(raw, _read_json_config(path))
        base_dir = os.path.dirname(os.path.abspath(path))

    env_map = {"PORT_RESILIENCE_SEED": ("seed", int),
               "PORT_RESILIENCE_THREADS": ("threads", int),
               "PORT_RESILIENCE_OUT": ("out_dir", str)}
    for env, (key, cast) in env_map.items():
        if os.getenv(env):
            raw[key] = cast(os.getenv(env))
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value

    try:
        cfg = PipelineConfig.model_validate(raw)
    except PydanticValidationError as e:
        raise ValidationError(f"invalid configuration: {e}") from e
    return _resolve_paths(cfg, base_dir)
