#!/usr/bin/env python3
"""
Stochastic and scheduled inputs of a problem instance.

Solar scenarios come from a per-timestep distribution fitted to a history
matrix (days x timesteps), bus loads from a base curve scaled by one random
coefficient per bus, EV job schedules from a start/shift/destination template
and congestion from peak windows or a random scheme. Every draw is a pure
function of (inputs, seed).
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from grid import GridData, GridError, grid_from_dict
from topology import (TimeSpaceNetwork, TransportNetwork, build_tsn, reachable_within,
                      transport_from_dict)

logger = logging.getLogger(__name__)

INSTANCE_SCHEMA_VERSION = 1
PROBABILITY_TOLERANCE = 1e-9


class InstanceError(ValueError):
    """Inconsistent instance parts."""


def hour_of(step: int, timesteps: int) -> float:
    """Clock hour at which timestep (or the timespan departing from it) starts."""
    return step * 24.0 / timesteps


# ---------------------------------------------------------------------------
# Solar
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SolarModel:
    means: np.ndarray
    spreads: np.ndarray
    panel_max: float
    family: str = "truncnorm"
    history: np.ndarray | None = field(default=None, repr=False)

    @property
    def timesteps(self) -> int:
        return len(self.means)


def fit_solar_model(history, panel_max: float | None = None, family: str = "truncnorm") -> SolarModel:
    """Per-timestep mean/spread of a days x |T| history matrix in kW."""
    history = np.asarray(history, dtype=float)
    if history.size == 0 or history.ndim != 2:
        raise InstanceError("solar history is empty")
    if history.shape[0] < 2:
        raise InstanceError(f"solar history needs at least 2 days, got {history.shape[0]}")
    if np.any(history < 0) or not np.all(np.isfinite(history)):
        raise InstanceError("solar history must be finite and non-negative")
    if family not in ("truncnorm", "empirical"):
        raise InstanceError(f"unknown solar family {family!r}")
    upper = float(panel_max) if panel_max is not None else float(history.max())
    return SolarModel(
        means=history.mean(axis=0),
        spreads=np.where(np.ptp(history, axis=0) > 0, history.std(axis=0, ddof=1), 0.0),
        panel_max=upper,
        family=family,
        history=history if family == "empirical" else None,
    )


def sample_solar(model: SolarModel, n: int, seed) -> np.ndarray:
    """n Monte Carlo profiles (n x |T| kW), clamped to [0, panel max]."""
    rng = np.random.default_rng(seed)
    if model.family == "empirical":
        rows = rng.integers(0, model.history.shape[0], size=n)
        return np.clip(model.history[rows], 0.0, model.panel_max)

    profiles = np.tile(np.clip(model.means, 0.0, model.panel_max), (n, 1))
    varying = model.spreads > 0
    if np.any(varying):
        loc = model.means[varying]
        scale = model.spreads[varying]
        a = (0.0 - loc) / scale
        b = (model.panel_max - loc) / scale
        draws = stats.truncnorm.rvs(a, b, loc=loc, scale=scale,
                                    size=(n, int(varying.sum())), random_state=rng)
        profiles[:, varying] = np.clip(draws, 0.0, model.panel_max)
    return profiles


def clear_sky_profile(timesteps: int, panel_max: float, sunrise: float = 6.0,
                      sunset: float = 18.0) -> np.ndarray:
    hours = np.array([hour_of(t, timesteps) for t in range(timesteps)])
    bell = np.sin(np.pi * (hours - sunrise) / (sunset - sunrise))
    bell[(hours <= sunrise) | (hours >= sunset)] = 0.0
    return panel_max * np.clip(bell, 0.0, None)


def synthetic_solar_history(days: int, timesteps: int, panel_max: float, seed,
                            noise_low: float = 0.4, noise_high: float = 1.0) -> np.ndarray:
    """Clear-sky bell curve times iid uniform multiplicative cloud noise."""
    if not 0 <= noise_low <= noise_high <= 1:
        raise InstanceError("noise bounds must satisfy 0 <= low <= high <= 1")
    rng = np.random.default_rng(seed)
    noise = rng.uniform(noise_low, noise_high, size=(days, timesteps))
    return clear_sky_profile(timesteps, panel_max)[None, :] * noise


def load_solar_history(path: str | Path, timesteps: int | None = None) -> np.ndarray:
    """Days x |T| matrix from CSV or Excel, resampled to |T| columns when needed."""
    path = Path(path)
    if path.suffix.lower() in (".xlsx", ".xls"):
        frame = pd.read_excel(path, header=None)
    else:
        frame = pd.read_csv(path, header=None)
    frame = frame.apply(pd.to_numeric, errors="coerce").dropna(how="all")
    nan_count = int(frame.isna().sum().sum())
    if nan_count:
        logger.warning("%d non-numeric solar history cells in %s replaced by 0", nan_count, path)
    history = frame.fillna(0.0).to_numpy(dtype=float)
    if timesteps is not None and history.shape[1] != timesteps:
        source = np.linspace(0.0, 24.0, history.shape[1], endpoint=False)
        target = np.array([hour_of(t, timesteps) for t in range(timesteps)])
        history = np.vstack([np.interp(target, source, row) for row in history])
    return np.clip(history, 0.0, None)


# ---------------------------------------------------------------------------
# Loads
# ---------------------------------------------------------------------------

def load_coefficients(path: str | Path) -> np.ndarray:
    with open(Path(path), "r") as f:
        return np.asarray(json.load(f)["coefficients"], dtype=float)


def base_load_profile(grid: GridData, coefficients, timesteps: int) -> tuple[np.ndarray, np.ndarray]:
    """P/Q base curves (buses x |T|): bus peak loads scaled by the daily coefficients."""
    coefficients = np.asarray(coefficients, dtype=float)
    source = np.arange(len(coefficients)) * 24.0 / len(coefficients)
    target = np.array([hour_of(t, timesteps) for t in range(timesteps)])
    shape = np.interp(target, source, coefficients, period=24.0)
    dn = grid.network
    peak_p = np.array([dn.base_load_p.get(b, 0.0) for b in dn.buses])
    peak_q = np.array([dn.base_load_q.get(b, 0.0) for b in dn.buses])
    return np.outer(peak_p, shape), np.outer(peak_q, shape)


def sample_load(base_p, base_q, seed, low: float = 0.9, high: float = 1.1):
    """Scale every bus curve by one coefficient drawn uniformly from [low, high]."""
    base_p = np.asarray(base_p, dtype=float)
    base_q = np.asarray(base_q, dtype=float)
    rng = np.random.default_rng(seed)
    coefficients = rng.uniform(low, high, size=base_p.shape[0])
    return base_p * coefficients[:, None], base_q * coefficients[:, None], coefficients


# ---------------------------------------------------------------------------
# Fleet, costs, schedules, congestion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvFleet:
    e_min: tuple[float, ...]
    e_max: tuple[float, ...]
    e_init: tuple[float, ...]
    p_max: tuple[float, ...]
    eta: float = 0.05
    p_move: float = 3.0

    @property
    def size(self) -> int:
        return len(self.e_init)

    @classmethod
    def uniform(cls, n: int, e_min: float = 6.0, e_max: float = 60.0, e_init: float = 40.0,
                p_max: float = 11.0, eta: float = 0.05, p_move: float = 3.0) -> "EvFleet":
        return cls(e_min=(e_min,) * n, e_max=(e_max,) * n, e_init=(e_init,) * n,
                   p_max=(p_max,) * n, eta=eta, p_move=p_move)

    def validate(self) -> None:
        sizes = {len(self.e_min), len(self.e_max), len(self.e_init), len(self.p_max)}
        if len(sizes) != 1:
            raise InstanceError("fleet parameter vectors differ in length")
        for k in range(self.size):
            if not self.e_min[k] <= self.e_init[k] <= self.e_max[k]:
                raise InstanceError(f"EV {k}: need E_min <= E_init <= E_max")
            if self.p_max[k] <= 0:
                raise InstanceError(f"EV {k}: P_ev_max must be positive")
        if not 0 <= self.eta < 1:
            raise InstanceError(f"loss fraction eta must be in [0, 1), got {self.eta}")
        if self.p_move < 0:
            raise InstanceError("P_move must be non-negative")

    def head(self, n: int) -> "EvFleet":
        return EvFleet(self.e_min[:n], self.e_max[:n], self.e_init[:n], self.p_max[:n],
                       self.eta, self.p_move)


@dataclass(frozen=True)
class CostParams:
    travel: float = 0.5
    charge: float = 0.15
    discharge: float = 0.12

    def validate(self) -> None:
        if min(self.travel, self.charge, self.discharge) < 0:
            raise InstanceError("cost coefficients must be non-negative")


@dataclass(frozen=True)
class JobSchedule:
    triples: tuple[tuple[int, int, int], ...] = ()  # (ev, physical node, timespan)

    def for_ev(self, k: int) -> list[tuple[int, int]]:
        return sorted((s, node) for ev, node, s in self.triples if ev == k)

    def validate(self, n_evs: int, nodes, spans: int) -> None:
        seen = set()
        for ev, node, s in self.triples:
            if not 0 <= ev < n_evs:
                raise InstanceError(f"schedule references EV {ev} outside the fleet")
            if node not in nodes:
                raise InstanceError(f"schedule node {node} is not a physical node")
            if not 0 <= s < spans:
                raise InstanceError(f"schedule timespan {s} outside 0..{spans - 1}")
            if (ev, s) in seen:
                raise InstanceError(f"EV {ev} has two schedule entries at timespan {s}")
            seen.add((ev, s))

    def head(self, n: int) -> "JobSchedule":
        return JobSchedule(tuple(t for t in self.triples if t[0] < n))


@dataclass(frozen=True)
class ScheduleTemplate:
    pairs: tuple[tuple[int, int], ...] = ((1, 11), (1, 13), (3, 11), (3, 13))
    pool_a: tuple[int, ...] = (6, 7, 9, 10, 12)
    pool_b: tuple[int, ...] = (2, 4, 5, 8)
    primary_starts: tuple[int, ...] = (1,)
    first_window: tuple[float, float] = (6.0, 12.0)
    second_window: tuple[float, float] = (14.0, 22.0)
    max_redraws: int = 50


def window_spans(window: Sequence[float], timesteps: int) -> list[int]:
    """Interior timespans whose departure hour falls in [lo, hi)."""
    lo, hi = window
    spans = timesteps - 1
    inside = [s for s in range(1, spans - 1) if lo <= hour_of(s, timesteps) < hi]
    if not inside:
        raise InstanceError(f"window {lo}-{hi} h is shorter than one timespan at |T|={timesteps}")
    return inside


def sample_schedules(n_evs: int, template: ScheduleTemplate, timesteps: int, seed,
                     tsn: TimeSpaceNetwork | None = None,
                     congestion: Sequence[int] | None = None) -> JobSchedule:
    """Start, two shifts and end-of-day destination for every EV.

    With a TSN and congestion profile given, draws whose legs cannot be driven
    in time are redrawn; InstanceError once template.max_redraws draws fail.
    """
    rng = np.random.default_rng(seed)
    spans = timesteps - 1
    first_spans = window_spans(template.first_window, timesteps)
    second_spans = [s for s in window_spans(template.second_window, timesteps)]
    triples = []
    for k in range(n_evs):
        plan = None
        for attempt in range(max(1, template.max_redraws)):
            start, destination = template.pairs[rng.integers(len(template.pairs))]
            if start in template.primary_starts:
                first_pool, second_pool = template.pool_a, template.pool_b
            else:
                first_pool, second_pool = template.pool_b, template.pool_a
            s1 = int(rng.choice(first_spans))
            later = [s for s in second_spans if s > s1]
            if not later:
                continue
            s2 = int(rng.choice(later))
            n1 = int(rng.choice(first_pool))
            n2 = int(rng.choice(second_pool))
            plan = [(int(start), 0), (n1, s1), (n2, s2), (int(destination), spans - 1)]
            if tsn is None or congestion is None or _plan_reachable(tsn, congestion, plan):
                break
        else:
            if plan is None:
                raise InstanceError(f"EV {k}: no second-shift span after the first in {template.max_redraws} draws")
            raise InstanceError(f"EV {k}: no reachable schedule in {template.max_redraws} draws")
        triples.extend((k, node, s) for node, s in plan)
    return JobSchedule(tuple(triples))


def _plan_reachable(tsn, congestion, plan) -> bool:
    for (node, s), (next_node, next_s) in zip(plan, plan[1:]):
        if next_node not in reachable_within(tsn, congestion, node, s, next_s):
            return False
    return True


@dataclass(frozen=True)
class CongestionConfig:
    mode: str = "windows"  # windows | random
    windows: tuple[tuple[float, float], ...] = ((7.0, 9.0), (17.0, 19.0))
    probability: float = 0.2


def build_congestion_profile(config: CongestionConfig, timesteps: int, seed=None) -> tuple[int, ...]:
    """Binary j_s per timespan: peak windows by default, or Bernoulli draws."""
    spans = timesteps - 1
    if config.mode == "random":
        rng = np.random.default_rng(seed)
        return tuple(int(v) for v in rng.random(spans) < config.probability)
    if config.mode != "windows":
        raise InstanceError(f"unknown congestion mode {config.mode!r}")
    profile = []
    for s in range(spans):
        hour = hour_of(s, timesteps)
        profile.append(int(any(lo <= hour < hi for lo, hi in config.windows)))
    return tuple(profile)


# ---------------------------------------------------------------------------
# Instances
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioSet:
    probabilities: np.ndarray  # (SC,)
    pv_max: np.ndarray  # (SC, PV, T) kW

    @property
    def count(self) -> int:
        return len(self.probabilities)

    def validate(self, pv_count: int, timesteps: int) -> None:
        if self.count < 1:
            raise InstanceError("scenario set is empty")
        if np.any(self.probabilities <= 0):
            raise InstanceError("scenario probabilities must be positive")
        if abs(float(self.probabilities.sum()) - 1.0) > PROBABILITY_TOLERANCE:
            raise InstanceError(f"scenario probabilities sum to {self.probabilities.sum()}, not 1")
        if self.pv_max.shape != (self.count, pv_count, timesteps):
            raise InstanceError(f"pv availability has shape {self.pv_max.shape}, "
                                f"expected {(self.count, pv_count, timesteps)}")
        if np.any(self.pv_max < 0):
            raise InstanceError("pv availability must be non-negative")

    def only(self, sc: int) -> "ScenarioSet":
        return ScenarioSet(np.array([1.0]), self.pv_max[sc:sc + 1].copy())


def make_scenario_set(profiles, grid: GridData, panel_max: float,
                      probabilities=None) -> ScenarioSet:
    """Scale each sampled reference-panel profile onto every PV unit."""
    profiles = np.atleast_2d(np.asarray(profiles, dtype=float))
    count = profiles.shape[0]
    ratios = np.array([pv.panel_max / panel_max for pv in grid.pv_units]) if panel_max > 0 else \
        np.zeros(len(grid.pv_units))
    pv_max = profiles[:, None, :] * ratios[None, :, None]
    if probabilities is None:
        probabilities = np.full(count, 1.0 / count)
    return ScenarioSet(np.asarray(probabilities, dtype=float), pv_max)


@dataclass(frozen=True)
class ProblemInstance:
    transport: TransportNetwork
    tsn: TimeSpaceNetwork
    grid: GridData
    fleet: EvFleet
    costs: CostParams
    scenarios: ScenarioSet
    load_p: np.ndarray  # (B, T) kW
    load_q: np.ndarray  # (B, T) kvar
    schedule: JobSchedule
    congestion: tuple[int, ...]
    timesteps: int
    name: str = "instance"
    seed: int | None = None

    @property
    def n_evs(self) -> int:
        return self.fleet.size

    @property
    def n_scenarios(self) -> int:
        return self.scenarios.count

    @property
    def stations(self) -> list[int]:
        return sorted(self.transport.station_nodes)

    def deterministic(self, sc: int) -> "ProblemInstance":
        """Single-scenario copy (p = 1) of scenario sc."""
        if not 0 <= sc < self.n_scenarios:
            raise InstanceError(f"scenario {sc} outside 0..{self.n_scenarios - 1}")
        return _replace(self, scenarios=self.scenarios.only(sc), name=f"{self.name}-sc{sc}")


def _replace(instance: ProblemInstance, **changes) -> ProblemInstance:
    return replace(instance, **changes)


def assemble_instance(transport: TransportNetwork, grid: GridData, fleet: EvFleet,
                      costs: CostParams, scenarios: ScenarioSet, load_p, load_q,
                      schedule: JobSchedule, congestion: Sequence[int], timesteps: int,
                      tsn: TimeSpaceNetwork | None = None, delta_spans: int = 1,
                      name: str = "instance", seed: int | None = None) -> ProblemInstance:
    """Cross-check all parts and bundle them into one instance."""
    transport.validate()
    fleet.validate()
    costs.validate()
    if tsn is None:
        tsn = build_tsn(transport, timesteps, delta_spans)
    elif tsn.timestep_count != timesteps:
        raise InstanceError(f"TSN built for {tsn.timestep_count} timesteps, instance has {timesteps}")
    load_p = np.asarray(load_p, dtype=float)
    load_q = np.asarray(load_q, dtype=float)
    bus_count = len(grid.network.buses)
    for label, profile in (("P load", load_p), ("Q load", load_q)):
        if profile.shape != (bus_count, timesteps):
            raise InstanceError(f"{label} has shape {profile.shape}, expected {(bus_count, timesteps)}")
    if len(congestion) != timesteps - 1:
        raise InstanceError(f"congestion profile has {len(congestion)} entries, expected {timesteps - 1}")
    scenarios.validate(len(grid.pv_units), timesteps)
    schedule.validate(fleet.size, set(transport.nodes), timesteps - 1)
    try:
        grid.stations.validate(transport.station_nodes, set(grid.network.buses))
    except GridError as exc:
        raise InstanceError(str(exc)) from exc
    grid = GridData(grid.network, grid.generators, grid.pv_units,
                    grid.stations.restricted_to(transport.station_nodes))
    instance = ProblemInstance(
        transport=transport, tsn=tsn, grid=grid, fleet=fleet, costs=costs,
        scenarios=scenarios, load_p=load_p, load_q=load_q, schedule=schedule,
        congestion=tuple(int(j) for j in congestion), timesteps=int(timesteps),
        name=name, seed=seed,
    )
    logger.debug("Assembled %s: %d EVs, %d scenarios, |T|=%d", name, fleet.size,
                 scenarios.count, timesteps)
    return instance


def instance_to_dict(instance: ProblemInstance) -> dict[str, Any]:
    fleet = instance.fleet
    return {
        "schema_version": INSTANCE_SCHEMA_VERSION,
        "name": instance.name,
        "seed": instance.seed,
        "timesteps": instance.timesteps,
        "congestion_delta": instance.tsn.congestion_delta,
        "transport": instance.transport.to_dict(),
        "grid": instance.grid.to_dict(),
        "fleet": {"e_min": list(fleet.e_min), "e_max": list(fleet.e_max), "e_init": list(fleet.e_init),
                  "p_max": list(fleet.p_max), "eta": fleet.eta, "p_move": fleet.p_move},
        "costs": vars(instance.costs),
        "scenarios": {"probabilities": instance.scenarios.probabilities.tolist(),
                      "pv_max": instance.scenarios.pv_max.tolist()},
        "load_p": instance.load_p.tolist(),
        "load_q": instance.load_q.tolist(),
        "schedule": [list(t) for t in instance.schedule.triples],
        "congestion": list(instance.congestion),
    }


def instance_from_dict(data: dict[str, Any]) -> ProblemInstance:
    version = int(data.get("schema_version", -1))
    if version != INSTANCE_SCHEMA_VERSION:
        raise InstanceError(f"unsupported instance schema version {version}")
    fleet = data["fleet"]
    return assemble_instance(
        transport=transport_from_dict(data["transport"]),
        grid=grid_from_dict(data["grid"]),
        fleet=EvFleet(tuple(fleet["e_min"]), tuple(fleet["e_max"]), tuple(fleet["e_init"]),
                      tuple(fleet["p_max"]), float(fleet["eta"]), float(fleet["p_move"])),
        costs=CostParams(**data["costs"]),
        scenarios=ScenarioSet(np.asarray(data["scenarios"]["probabilities"], dtype=float),
                              np.asarray(data["scenarios"]["pv_max"], dtype=float)),
        load_p=data["load_p"],
        load_q=data["load_q"],
        schedule=JobSchedule(tuple(tuple(int(v) for v in t) for t in data["schedule"])),
        congestion=data["congestion"],
        timesteps=int(data["timesteps"]),
        delta_spans=int(data.get("congestion_delta", 1)),
        name=data.get("name", "instance"),
        seed=data.get("seed"),
    )


def save_instance(path: str | Path, instance: ProblemInstance) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(instance_to_dict(instance), f, indent=1)
    return path


def load_instance(path: str | Path) -> ProblemInstance:
    with open(Path(path), "r") as f:
        return instance_from_dict(json.load(f))


# ---------------------------------------------------------------------------
# Factory
# ---------------------------------------------------------------------------

@dataclass
class InstanceFactory:
    """Static parts of a study plus the samplers that vary between instances."""
    transport: TransportNetwork
    tsn: TimeSpaceNetwork
    grid: GridData
    fleet_params: dict
    costs: CostParams
    solar_model: SolarModel
    base_p: np.ndarray
    base_q: np.ndarray
    template: ScheduleTemplate
    congestion_config: CongestionConfig
    timesteps: int
    load_range: tuple[float, float] = (0.9, 1.1)
    check_reachability: bool = True

    def make_instance(self, n_evs: int, n_scenarios: int, seed: int,
                      name: str | None = None) -> ProblemInstance:
        solar_seq, load_seq, schedule_seq, congestion_seq = np.random.SeedSequence(seed).spawn(4)
        congestion = build_congestion_profile(self.congestion_config, self.timesteps, congestion_seq)
        profiles = sample_solar(self.solar_model, n_scenarios, solar_seq)
        load_p, load_q, _ = sample_load(self.base_p, self.base_q, load_seq, *self.load_range)
        schedule = sample_schedules(n_evs, self.template, self.timesteps, schedule_seq,
                                    self.tsn if self.check_reachability else None, congestion)
        return assemble_instance(
            transport=self.transport, grid=self.grid, fleet=EvFleet.uniform(n_evs, **self.fleet_params),
            costs=self.costs, scenarios=make_scenario_set(profiles, self.grid, self.solar_model.panel_max),
            load_p=load_p, load_q=load_q, schedule=schedule, congestion=congestion,
            timesteps=self.timesteps, tsn=self.tsn, name=name or f"ev{n_evs}-sc{n_scenarios}-{seed}",
            seed=int(seed),
        )


@dataclass
class SamplePool:
    """Pre-sampled solar profiles, load profiles and per-EV schedule sets."""
    factory: InstanceFactory
    solar: np.ndarray  # (n_solar, T)
    loads: list  # [(P, Q)]
    schedule_sets: list  # [JobSchedule over e_max EVs]
    congestion: tuple[int, ...]

    @classmethod
    def build(cls, factory: InstanceFactory, solar_n: int, load_n: int, schedule_sets: int,
              max_evs: int, seed: int) -> "SamplePool":
        solar_seq, load_seq, schedule_seq, congestion_seq = np.random.SeedSequence(seed).spawn(4)
        congestion = build_congestion_profile(factory.congestion_config, factory.timesteps, congestion_seq)
        solar = sample_solar(factory.solar_model, solar_n, solar_seq)
        loads = []
        for child in load_seq.spawn(load_n):
            p, q, _ = sample_load(factory.base_p, factory.base_q, child, *factory.load_range)
            loads.append((p, q))
        sets = [sample_schedules(max_evs, factory.template, factory.timesteps, child,
                                 factory.tsn if factory.check_reachability else None, congestion)
                for child in schedule_seq.spawn(schedule_sets)]
        logger.info("Sample pool: %d solar, %d load profiles, %d schedule sets for %d EVs",
                    solar_n, load_n, schedule_sets, max_evs)
        return cls(factory, solar, loads, sets, congestion)

    def make_instance(self, n_evs: int, n_scenarios: int, seed: int) -> ProblemInstance:
        rng = np.random.default_rng(seed)
        f = self.factory
        rows = rng.choice(len(self.solar), size=n_scenarios, replace=False)
        p, q = self.loads[int(rng.integers(len(self.loads)))]
        schedule = self.schedule_sets[int(rng.integers(len(self.schedule_sets)))].head(n_evs)
        return assemble_instance(
            transport=f.transport, grid=f.grid, fleet=EvFleet.uniform(n_evs, **f.fleet_params),
            costs=f.costs, scenarios=make_scenario_set(self.solar[rows], f.grid, f.solar_model.panel_max),
            load_p=p, load_q=q, schedule=schedule, congestion=self.congestion,
            timesteps=f.timesteps, tsn=f.tsn, name=f"pool-ev{n_evs}-sc{n_scenarios}-{seed}",
            seed=int(seed),
        )
