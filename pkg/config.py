#!/usr/bin/env python3
"""
Run configuration: one JSON file merged key by key over DEFAULT_CONFIG,
then environment overrides, then CLI flags.
"""

import copy
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from grid import load_distribution_network
from mipcore import SolverParams
from pipeline import DatasetConfig, IntervalStudyConfig, RetryConfig
from scenariogen import (CongestionConfig, CostParams, InstanceFactory, ScheduleTemplate, base_load_profile,
                         fit_solar_model, load_coefficients, load_solar_history, synthetic_solar_history)
from surrogate import LayerSpec, TrainConfig
from topology import build_tsn, load_transport_network

logger = logging.getLogger(__name__)

PROJECT_ROOT = Path(__file__).resolve().parent

DEFAULT_CONFIG: dict[str, Any] = {
    "name": "run",
    "paths": {
        "transport": "data/micro2.json",
        "grid": "data/micro3.json",
        "load_coefficients": "data/load_coefficients.json",
        "solar_history": None,
    },
    "grid": {"station_map": None},
    "horizon": {"timesteps": 6},
    "fleet": {"e_min": 6.0, "e_max": 60.0, "e_init": 40.0, "p_max": 11.0, "eta": 0.05, "p_move": 3.0},
    "costs": {"travel": 0.5, "charge": 0.15, "discharge": 0.12},
    "solar": {"family": "truncnorm", "panel_max": 400.0, "history_days": 365,
              "noise_low": 0.4, "noise_high": 1.0},
    "load": {"low": 0.9, "high": 1.1, "scale": 1.0},
    "schedule": {
        "pairs": [[1, 1], [1, 2]],
        "pool_a": [2],
        "pool_b": [1],
        "primary_starts": [1],
        "first_window": [4.0, 12.0],
        "second_window": [12.0, 20.0],
        "max_redraws": 50,
        "check_reachability": True,
    },
    "congestion": {"mode": "windows", "windows": [[7.0, 9.0], [17.0, 19.0]], "probability": 0.2,
                   "delta_spans": 1},
    "scenarios": {"count": 5},
    "dataset": {"ev_counts": [4, 8, 12], "samples_per_count": 50, "e_max": 12, "pool": None, "timing_samples": 2},
    "test_set": {"ev_counts": [6, 10], "samples_per_count": 15},
    "interval_study": {"intervals": [1, 2, 3, 4], "ev_range": [4, 12], "samples": 400},
    "training": {"epochs": 30, "batch_size": 16, "lr": 0.001, "weight_decay": 0.0, "val_fraction": 0.1,
                 "loss": "weighted_bce", "gamma_pos": 0.0, "gamma_neg": 4.0, "clip": 0.05,
                 "layers": {"channels": [32, 64, 64], "kernel": 3, "pool": 2, "hidden": 256, "dropout": 0.0}},
    "solver": {"gap": 0.001, "time_limit": 7200.0, "threads": 1, "seed": 0},
    "retry": {"step": 0.1, "max_attempts": None, "fallback": True},
    "workers": 1,
    "seed": 0,
    "out_dir": "runs/default",
}

ENV_OVERRIDES = {
    "EVJRS_TRANSPORT": ("paths.transport", str),
    "EVJRS_GRID": ("paths.grid", str),
    "EVJRS_OUT": ("out_dir", str),
    "EVJRS_SEED": ("seed", int),
    "EVJRS_WORKERS": ("workers", int),
}


class ConfigError(ValueError):
    """Invalid configuration value, reported with its dotted field path."""

    def __init__(self, field: str, reason: str):
        super().__init__(f"{field}: {reason}")
        self.field = field


def deep_merge(defaults: Mapping, overrides: Mapping) -> dict:
    """Key-by-key merge; nested dicts merge, everything else replaces."""
    merged = copy.deepcopy(dict(defaults))
    for key, value in overrides.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _set_path(data: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        node = node.setdefault(key, {})
    node[keys[-1]] = value


def resolve_path(value: str | None) -> Path | None:
    """Absolute paths as given; relative ones against the working directory, then the project root."""
    if value is None:
        return None
    path = Path(value)
    if path.is_absolute() or path.exists():
        return path
    bundled = PROJECT_ROOT / path
    return bundled if bundled.exists() else path


@dataclass(frozen=True)
class RunConfig:
    data: dict
    source: str | None = None

    def get(self, dotted: str, default=None):
        node: Any = self.data
        for key in dotted.split("."):
            if not isinstance(node, Mapping) or key not in node:
                return default
            node = node[key]
        return node

    def section(self, name: str) -> dict:
        return self.data[name]

    @property
    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.data, sort_keys=True).encode("utf-8")).hexdigest()

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def out_dir(self) -> Path:
        return Path(self.data["out_dir"])

    def path(self, name: str) -> Path | None:
        return resolve_path(self.data["paths"].get(name))

    def timesteps(self) -> int:
        return int(self.data["horizon"]["timesteps"])

    def solver_params(self) -> SolverParams:
        s = self.data["solver"]
        return SolverParams(gap=float(s["gap"]), time_limit=float(s["time_limit"]),
                            threads=int(s["threads"]), seed=int(s["seed"]))

    def retry_config(self) -> RetryConfig:
        r = self.data["retry"]
        return RetryConfig(step=float(r["step"]), max_attempts=r.get("max_attempts"),
                           fallback=bool(r["fallback"]))

    def train_config(self) -> TrainConfig:
        t = dict(self.data["training"])
        layers = dict(t.pop("layers"))
        layers["channels"] = tuple(layers["channels"])
        return TrainConfig(seed=self.seed, layers=LayerSpec(**layers), **t)

    def dataset_config(self) -> DatasetConfig:
        d = self.data["dataset"]
        return DatasetConfig(ev_counts=tuple(int(e) for e in d["ev_counts"]),
                             samples_per_count=int(d["samples_per_count"]), e_max=int(d["e_max"]),
                             seed=self.seed, solver=self.solver_params(), workers=int(self.data["workers"]),
                             pool=tuple(d["pool"]) if d.get("pool") else None)

    def interval_study_config(self) -> IntervalStudyConfig:
        s = self.data["interval_study"]
        return IntervalStudyConfig(intervals=tuple(int(i) for i in s["intervals"]),
                                   ev_range=(int(s["ev_range"][0]), int(s["ev_range"][1])),
                                   samples=int(s["samples"]))

    def schedule_template(self) -> ScheduleTemplate:
        s = self.data["schedule"]
        return ScheduleTemplate(
            pairs=tuple(tuple(int(n) for n in p) for p in s["pairs"]),
            pool_a=tuple(int(n) for n in s["pool_a"]),
            pool_b=tuple(int(n) for n in s["pool_b"]),
            primary_starts=tuple(int(n) for n in s["primary_starts"]),
            first_window=tuple(float(h) for h in s["first_window"]),
            second_window=tuple(float(h) for h in s["second_window"]),
            max_redraws=int(s["max_redraws"]),
        )

    def congestion_config(self) -> CongestionConfig:
        c = self.data["congestion"]
        return CongestionConfig(mode=c["mode"], windows=tuple(tuple(float(h) for h in w) for w in c["windows"]),
                                probability=float(c["probability"]))


def validate_config(data: dict) -> None:
    def require(cond: bool, field: str, reason: str) -> None:
        if not cond:
            raise ConfigError(field, reason)

    for name in ("transport", "grid", "load_coefficients", "solar_history"):
        value = data["paths"].get(name)
        if value is None:
            require(name == "solar_history", f"paths.{name}", "is required")
            continue
        require(resolve_path(value).exists(), f"paths.{name}", f"file not found: {value}")
    timesteps = data["horizon"]["timesteps"]
    require(isinstance(timesteps, int) and timesteps >= 2, "horizon.timesteps", "must be an integer >= 2")
    require(int(data["scenarios"]["count"]) >= 1, "scenarios.count", "must be >= 1")
    fleet = data["fleet"]
    require(fleet["e_min"] <= fleet["e_init"] <= fleet["e_max"], "fleet.e_init", "must lie in [e_min, e_max]")
    require(fleet["p_max"] > 0, "fleet.p_max", "must be positive")
    require(0 <= fleet["eta"] < 1, "fleet.eta", "must be in [0, 1)")
    for key in ("travel", "charge", "discharge"):
        require(data["costs"][key] >= 0, f"costs.{key}", "must be non-negative")
    require(data["solar"]["family"] in ("truncnorm", "empirical"), "solar.family",
            "must be 'truncnorm' or 'empirical'")
    require(data["load"]["low"] <= data["load"]["high"], "load.high", "must be >= load.low")
    require(data["congestion"]["mode"] in ("windows", "random"), "congestion.mode",
            "must be 'windows' or 'random'")
    require(int(data["congestion"]["delta_spans"]) >= 1, "congestion.delta_spans", "must be >= 1")
    dataset = data["dataset"]
    require(len(dataset["ev_counts"]) > 0, "dataset.ev_counts", "must not be empty")
    require(max(dataset["ev_counts"]) <= dataset["e_max"], "dataset.ev_counts", "must not exceed dataset.e_max")
    require(max(data["test_set"]["ev_counts"]) <= dataset["e_max"], "test_set.ev_counts",
            "must not exceed dataset.e_max")
    require(int(dataset.get("timing_samples", 1)) >= 1, "dataset.timing_samples", "must be >= 1")
    study = data["interval_study"]
    low, high = (int(e) for e in study["ev_range"])
    require(1 <= low <= high <= dataset["e_max"], "interval_study.ev_range", "must lie within [1, dataset.e_max]")
    for interval in study["intervals"]:
        require(int(interval) >= 1 and -(-low // int(interval)) * int(interval) <= high, "interval_study.intervals",
                f"interval {interval} has no EV count within {low}..{high}")
    require(int(study["samples"]) >= 1, "interval_study.samples", "must be >= 1")
    require(data["solver"]["gap"] >= 0, "solver.gap", "must be >= 0")
    require(data["solver"]["time_limit"] > 0, "solver.time_limit", "must be > 0")
    require(data["training"]["loss"] in ("weighted_bce", "asymmetric"), "training.loss",
            "must be 'weighted_bce' or 'asymmetric'")
    require(0 < data["retry"]["step"] <= 1, "retry.step", "must be in (0, 1]")
    require(int(data["workers"]) >= 1, "workers", "must be >= 1")


def load_config(path: str | Path | None = None, overrides: Mapping | None = None,
                env: Mapping[str, str] | None = None) -> RunConfig:
    """Defaults <- config file <- environment <- explicit overrides (dotted keys)."""
    data = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError("config", f"file not found: {path}")
        try:
            with open(path, "r") as f:
                data = deep_merge(data, json.load(f))
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON in {path}: {exc}") from exc

    env = os.environ if env is None else env
    for variable, (dotted, cast) in ENV_OVERRIDES.items():
        if env.get(variable):
            try:
                _set_path(data, dotted, cast(env[variable]))
            except ValueError as exc:
                raise ConfigError(dotted, f"bad value in {variable}: {exc}") from exc
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_path(data, dotted, value)

    validate_config(data)
    return RunConfig(data, str(path) if path is not None else None)


def build_factory(cfg: RunConfig) -> InstanceFactory:
    """Load networks and fit the samplers described by the config."""
    timesteps = cfg.timesteps()
    transport = load_transport_network(cfg.path("transport"))
    tsn = build_tsn(transport, timesteps, int(cfg.get("congestion.delta_spans", 1)))
    station_map = cfg.get("grid.station_map")
    grid = load_distribution_network(cfg.path("grid"), station_map)

    solar = cfg.section("solar")
    history_path = cfg.path("solar_history")
    if history_path is not None:
        history = load_solar_history(history_path, timesteps)
    else:
        history = synthetic_solar_history(int(solar["history_days"]), timesteps, float(solar["panel_max"]),
                                          cfg.seed, float(solar["noise_low"]), float(solar["noise_high"]))
    solar_model = fit_solar_model(history, float(solar["panel_max"]), solar["family"])

    base_p, base_q = base_load_profile(grid, load_coefficients(cfg.path("load_coefficients")), timesteps)
    scale = float(cfg.get("load.scale", 1.0))
    fleet = cfg.section("fleet")
    return InstanceFactory(
        transport=transport, tsn=tsn, grid=grid,
        fleet_params={k: float(v) for k, v in fleet.items()},
        costs=CostParams(**{k: float(v) for k, v in cfg.section("costs").items()}),
        solar_model=solar_model, base_p=base_p * scale, base_q=base_q * scale,
        template=cfg.schedule_template(), congestion_config=cfg.congestion_config(), timesteps=timesteps,
        load_range=(float(cfg.get("load.low")), float(cfg.get("load.high"))),
        check_reachability=bool(cfg.get("schedule.check_reachability", True)),
    )
