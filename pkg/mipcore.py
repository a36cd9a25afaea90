#!/usr/bin/env python3
"""
Joint EV routing and scheduling MIP.

The model couples the EV routing over the congestion-aware time-space network
with EV energy bookkeeping and a LinDistFlow dispatch of the distribution
grid, for one scenario (deterministic) or a weighted scenario set
(stochastic). Constraints are collected row by row into a sparse matrix and
handed to HiGHS through scipy. `check_feasible` and `objective_value` are an
independent substitution oracle that never looks at the assembled rows.
"""

import json
import logging
import time
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy import sparse
from scipy.optimize import Bounds, LinearConstraint, milp

from grid import GridError, validate_radial
from scenariogen import ProblemInstance
from topology import available_arcs

logger = logging.getLogger(__name__)

CONTINUOUS_KINDS = ("Pg", "Qg", "Pv", "Pc", "Pd", "Pm", "E", "Pf", "Qf", "V")
# kinds indexed by timesteps 1..|T|-1 instead of 0..|T|-1
SHIFTED_KINDS = ("Ic", "Id", "Pc", "Pd", "Pm")

FEASIBLE_STATUSES = ("optimal", "gap-feasible", "time-limit-feasible")
VOLTAGE_BAND = (0.95, 1.05)
GAP_EPSILON = 1e-9


class ModelError(ValueError):
    """Invalid model construction or fixing request."""


@dataclass(frozen=True)
class VariableIndex:
    """Flat index <-> variable tuple bijection.

    Binaries come first, scenario-major then EV-major with a constant stride
    d_ev = |arcs|*|S| + 2*|CS|*(|T|-1): routing I[s, arc] followed by the
    charge and discharge binaries per station and timestep. Continuous
    blocks follow in CONTINUOUS_KINDS order.
    """
    scenarios: int
    evs: int
    arcs: int
    timespans: int
    stations: tuple[int, ...]
    timesteps: int
    generators: int
    pv_units: int
    lines: int
    buses: int

    @classmethod
    def for_instance(cls, instance: ProblemInstance) -> "VariableIndex":
        return cls(
            scenarios=instance.n_scenarios,
            evs=instance.n_evs,
            arcs=instance.tsn.arc_count,
            timespans=instance.tsn.timespan_count,
            stations=tuple(instance.stations),
            timesteps=instance.timesteps,
            generators=len(instance.grid.generators),
            pv_units=len(instance.grid.pv_units),
            lines=len(instance.grid.network.lines),
            buses=len(instance.grid.network.buses),
        )

    @property
    def d_ev(self) -> int:
        return self.arcs * self.timespans + 2 * len(self.stations) * (self.timesteps - 1)

    @property
    def binary_count(self) -> int:
        return self.scenarios * self.evs * self.d_ev

    @property
    def routing_count(self) -> int:
        return self.scenarios * self.evs * self.arcs * self.timespans

    @property
    def charge_count(self) -> int:
        return self.binary_count - self.routing_count

    @cached_property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        sc, k, cs, t = self.scenarios, self.evs, len(self.stations), self.timesteps
        return {
            "Pg": (sc, self.generators, t),
            "Qg": (sc, self.generators, t),
            "Pv": (sc, self.pv_units, t),
            "Pc": (sc, k, cs, t - 1),
            "Pd": (sc, k, cs, t - 1),
            "Pm": (sc, k, t - 1),
            "E": (sc, k, t),
            "Pf": (sc, self.lines, t),
            "Qf": (sc, self.lines, t),
            "V": (sc, self.buses, t),
        }

    @cached_property
    def offsets(self) -> dict[str, int]:
        offsets, cursor = {}, self.binary_count
        for kind in CONTINUOUS_KINDS:
            offsets[kind] = cursor
            cursor += int(np.prod(self.shapes[kind]))
        return offsets

    @property
    def size(self) -> int:
        last = CONTINUOUS_KINDS[-1]
        return self.offsets[last] + int(np.prod(self.shapes[last]))

    def _ev_base(self, sc: int, k: int) -> int:
        return (sc * self.evs + k) * self.d_ev

    def routing(self, sc: int, k: int, arc: int, s: int) -> int:
        return self._ev_base(sc, k) + s * self.arcs + arc

    def charge(self, sc: int, k: int, station: int, t: int) -> int:
        """station is a position in `stations`; t runs over 1..|T|-1."""
        return self._ev_base(sc, k) + self.arcs * self.timespans + station * (self.timesteps - 1) + t - 1

    def discharge(self, sc: int, k: int, station: int, t: int) -> int:
        return self.charge(sc, k, station, t) + len(self.stations) * (self.timesteps - 1)

    def var(self, kind: str, *idx: int) -> int:
        if kind == "I":
            return self.routing(*idx)
        if kind == "Ic":
            return self.charge(*idx)
        if kind == "Id":
            return self.discharge(*idx)
        idx = list(idx)
        if kind in SHIFTED_KINDS:
            idx[-1] -= 1
        return self.offsets[kind] + int(np.ravel_multi_index(idx, self.shapes[kind]))

    def tuple_of(self, j: int) -> tuple[str, tuple[int, ...]]:
        if not 0 <= j < self.size:
            raise ModelError(f"variable index {j} outside 0..{self.size - 1}")
        if j < self.binary_count:
            block, local = divmod(j, self.d_ev)
            sc, k = divmod(block, self.evs)
            routing_span = self.arcs * self.timespans
            if local < routing_span:
                s, arc = divmod(local, self.arcs)
                return "I", (sc, k, arc, s)
            local -= routing_span
            per_kind = len(self.stations) * (self.timesteps - 1)
            kind = "Ic" if local < per_kind else "Id"
            station, t = divmod(local % per_kind, self.timesteps - 1)
            return kind, (sc, k, station, t + 1)
        for kind in reversed(CONTINUOUS_KINDS):
            if j >= self.offsets[kind]:
                idx = list(np.unravel_index(j - self.offsets[kind], self.shapes[kind]))
                idx = [int(v) for v in idx]
                if kind in SHIFTED_KINDS:
                    idx[-1] += 1
                return kind, tuple(idx)
        raise ModelError(f"variable index {j} not mapped")  # unreachable

    def name(self, j: int) -> str:
        kind, idx = self.tuple_of(j)
        return f"{kind}[{','.join(str(v) for v in idx)}]"

    def split(self, x) -> dict[str, np.ndarray]:
        """Reshape a flat value vector into one array per variable kind."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.size,):
            raise ModelError(f"value vector has {x.size} entries, model has {self.size}")
        sc, k, cs, t = self.scenarios, self.evs, len(self.stations), self.timesteps
        binaries = x[:self.binary_count].reshape(sc, k, self.d_ev)
        routing_span = self.arcs * self.timespans
        per_kind = cs * (t - 1)
        parts = {
            "I": binaries[..., :routing_span].reshape(sc, k, self.timespans, self.arcs),
            "Ic": binaries[..., routing_span:routing_span + per_kind].reshape(sc, k, cs, t - 1),
            "Id": binaries[..., routing_span + per_kind:].reshape(sc, k, cs, t - 1),
        }
        for kind in CONTINUOUS_KINDS:
            size = int(np.prod(self.shapes[kind]))
            parts[kind] = x[self.offsets[kind]:self.offsets[kind] + size].reshape(self.shapes[kind])
        return parts


@dataclass
class MipModel:
    index: VariableIndex
    objective: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    integrality: np.ndarray
    base_lb: np.ndarray | None = None
    base_ub: np.ndarray | None = None
    row_ids: list = field(default_factory=list)
    col_ids: list = field(default_factory=list)
    coefs: list = field(default_factory=list)
    row_lower: list = field(default_factory=list)
    row_upper: list = field(default_factory=list)
    row_family: list = field(default_factory=list)
    fixed: dict = field(default_factory=dict)
    conflicts: list = field(default_factory=list)
    mode: str = "stochastic"
    scenario: int | None = None

    @property
    def n_vars(self) -> int:
        return len(self.objective)

    @property
    def n_rows(self) -> int:
        return len(self.row_lower)

    def add_row(self, cols, coefs, lower: float, upper: float, family: str) -> int:
        row = self.n_rows
        for col, coef in zip(cols, coefs):
            if not 0 <= col < self.n_vars:
                raise ModelError(f"{family}: column {col} outside 0..{self.n_vars - 1}")
            self.row_ids.append(row)
            self.col_ids.append(int(col))
            self.coefs.append(float(coef))
        self.row_lower.append(float(lower))
        self.row_upper.append(float(upper))
        self.row_family.append(family)
        return row

    def constraint_matrix(self) -> sparse.csr_array:
        return sparse.csr_array((self.coefs, (self.row_ids, self.col_ids)),
                                shape=(self.n_rows, self.n_vars))

    def families(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for family in self.row_family:
            counts[family] = counts.get(family, 0) + 1
        return counts

    def summary(self) -> dict:
        return {
            "variables": self.n_vars,
            "binaries": int(self.integrality.sum()),
            "routing_binaries": self.index.routing_count,
            "charge_binaries": self.index.charge_count,
            "rows": self.n_rows,
            "nonzeros": len(self.coefs),
            "fixed": len(self.fixed),
            "families": self.families(),
        }

    def with_bounds(self, lb, ub, fixed, conflicts) -> "MipModel":
        # rows are never mutated after build, so copies share them
        return replace(self, lb=lb, ub=ub, fixed=fixed, conflicts=conflicts)


@dataclass(frozen=True)
class SolverParams:
    gap: float = 0.001
    time_limit: float = 7200.0
    threads: int = 1
    seed: int = 0
    verbose: bool = False

    def validate(self) -> None:
        if self.gap < 0:
            raise ModelError(f"MIP gap must be >= 0, got {self.gap}")
        if self.time_limit <= 0:
            raise ModelError(f"time limit must be > 0, got {self.time_limit}")


@dataclass
class Solution:
    values: np.ndarray | None
    objective: float | None
    status: str
    solve_seconds: float
    mip_gap: float | None = None
    message: str = ""
    threads: int = 1
    seed: int = 0

    @property
    def feasible(self) -> bool:
        return self.status in FEASIBLE_STATUSES and self.values is not None


@dataclass(frozen=True)
class PartialAssignment:
    values: dict = field(default_factory=dict)  # binary flat index -> 0/1

    def __len__(self) -> int:
        return len(self.values)

    def validate(self, model: MipModel) -> None:
        for j, v in self.values.items():
            if not 0 <= j < model.n_vars or not model.integrality[j]:
                raise ModelError(f"index {j} is not a binary variable")
            if v not in (0, 1):
                raise ModelError(f"binary {model.index.name(j)} fixed to {v}, expected 0 or 1")


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def build_model(instance: ProblemInstance, mode: str = "stochastic",
                scenario: int | None = None) -> tuple[MipModel, VariableIndex]:
    """Assemble the full MIP; deterministic mode keeps only `scenario` with p = 1."""
    if mode == "deterministic":
        if scenario is None:
            raise ModelError("deterministic build needs a scenario")
        instance = instance.deterministic(scenario)
    elif mode != "stochastic":
        raise ModelError(f"unknown build mode {mode!r}")

    index = VariableIndex.for_instance(instance)
    n = index.size
    integrality = np.zeros(n, dtype=np.int8)
    integrality[:index.binary_count] = 1
    lb = np.zeros(n)
    ub = np.full(n, np.inf)
    ub[:index.binary_count] = 1.0
    model = MipModel(index=index, objective=np.zeros(n), lb=lb, ub=ub, integrality=integrality,
                     mode=mode, scenario=scenario)

    _set_objective(model, instance)
    add_routing_constraints(model, instance)
    add_ev_energy_constraints(model, instance)
    add_generation_constraints(model, instance)
    add_network_constraints(model, instance)

    model.base_lb = model.lb.copy()
    model.base_ub = model.ub.copy()
    logger.debug("Built %s model %s: %d variables (%d binary), %d rows", mode, instance.name,
                 n, index.binary_count, model.n_rows)
    return model, index


def _set_objective(model: MipModel, instance: ProblemInstance) -> None:
    index = model.index
    c = model.objective
    costs = instance.costs
    nsa = sorted(instance.tsn.nsa)
    for sc, p in enumerate(instance.scenarios.probabilities):
        for u, gen in enumerate(instance.grid.generators):
            for t in range(index.timesteps):
                c[index.var("Pg", sc, u, t)] = p * gen.cost
        for k in range(index.evs):
            for s in range(index.timespans):
                for a in nsa:
                    c[index.routing(sc, k, a, s)] = p * costs.travel
            for i in range(len(index.stations)):
                for t in range(1, index.timesteps):
                    c[index.var("Pc", sc, k, i, t)] = p * costs.charge
                    c[index.var("Pd", sc, k, i, t)] = -p * costs.discharge


def add_routing_constraints(model: MipModel, instance: ProblemInstance) -> None:
    """One available arc per timespan, flow conservation, schedule pinning."""
    index = model.index
    tsn = instance.tsn
    arcs = range(tsn.arc_count)
    origin_arcs = {}
    for k, node, s in instance.schedule.triples:
        out = tsn.out_arcs[tsn.position_of(node)]
        if not out:
            raise ModelError(f"schedule node {node} has no outgoing arc")
        origin_arcs[(k, s)] = out

    for sc in range(index.scenarios):
        for k in range(index.evs):
            for s in range(index.timespans):
                allowed = available_arcs(tsn, instance.congestion[s])
                cols = [index.routing(sc, k, a, s) for a in arcs if a in allowed]
                model.add_row(cols, [1.0] * len(cols), 1.0, 1.0, "route_one")
                for a in arcs:
                    if a not in allowed:
                        model.ub[index.routing(sc, k, a, s)] = 0.0

            for p in range(len(tsn.nodes)):
                outgoing, incoming = tsn.out_arcs[p], tsn.in_arcs[p]
                for s in range(index.timespans - 1):
                    cols = [index.routing(sc, k, a, s + 1) for a in outgoing]
                    cols += [index.routing(sc, k, a, s) for a in incoming]
                    coefs = [1.0] * len(outgoing) + [-1.0] * len(incoming)
                    model.add_row(cols, coefs, 0.0, 0.0, "flow")

        for (k, s), out in origin_arcs.items():
            if k >= index.evs:
                continue
            cols = [index.routing(sc, k, a, s) for a in out]
            model.add_row(cols, [1.0] * len(cols), 1.0, 1.0, "schedule")


def add_ev_energy_constraints(model: MipModel, instance: ProblemInstance) -> None:
    """Station gating, movement power, charge/discharge rates and energy balance."""
    index = model.index
    tsn = instance.tsn
    fleet = instance.fleet
    hours = 24.0 / index.timesteps
    nsa = sorted(tsn.nsa)
    stays = [tsn.stationary_arc_of[i] for i in index.stations]
    station_range = range(len(index.stations))

    for sc in range(index.scenarios):
        for k in range(index.evs):
            for s in range(index.timespans):
                t = s + 1
                for i in station_range:
                    cols = [index.charge(sc, k, i, t), index.discharge(sc, k, i, t),
                            index.routing(sc, k, stays[i], s)]
                    model.add_row(cols, [1.0, 1.0, -1.0], -np.inf, 0.0, "station_gate")

                cols = [index.var("Pm", sc, k, t)] + [index.routing(sc, k, a, s) for a in nsa]
                model.add_row(cols, [1.0] + [-fleet.p_move] * len(nsa), 0.0, 0.0, "move_power")

                for i in station_range:
                    model.add_row([index.var("Pc", sc, k, i, t), index.charge(sc, k, i, t)],
                                  [1.0, -fleet.p_max[k]], -np.inf, 0.0, "charge_rate")
                    model.add_row([index.var("Pd", sc, k, i, t), index.discharge(sc, k, i, t)],
                                  [1.0, -fleet.p_max[k]], -np.inf, 0.0, "discharge_rate")

            for t in range(index.timesteps):
                e = index.var("E", sc, k, t)
                model.lb[e] = fleet.e_min[k]
                model.ub[e] = fleet.e_max[k]
            e0 = index.var("E", sc, k, 0)
            model.lb[e0] = model.ub[e0] = fleet.e_init[k]

            for t in range(1, index.timesteps):
                cols = [index.var("E", sc, k, t), index.var("E", sc, k, t - 1)]
                coefs = [1.0, -1.0]
                for i in station_range:
                    cols += [index.var("Pc", sc, k, i, t), index.var("Pd", sc, k, i, t)]
                    coefs += [-hours * (1.0 - fleet.eta), hours * (1.0 + fleet.eta)]
                cols.append(index.var("Pm", sc, k, t))
                coefs.append(hours * (1.0 + fleet.eta))
                model.add_row(cols, coefs, 0.0, 0.0, "energy_balance")


def add_generation_constraints(model: MipModel, instance: ProblemInstance) -> None:
    """Generator boxes and curtailable PV availability, as variable bounds."""
    index = model.index
    pv_max = instance.scenarios.pv_max
    for sc in range(index.scenarios):
        for t in range(index.timesteps):
            for u, gen in enumerate(instance.grid.generators):
                pg, qg = index.var("Pg", sc, u, t), index.var("Qg", sc, u, t)
                model.lb[pg], model.ub[pg] = gen.p_min, gen.p_max
                model.lb[qg], model.ub[qg] = gen.q_min, gen.q_max
            for p in range(index.pv_units):
                pv = index.var("Pv", sc, p, t)
                model.lb[pv], model.ub[pv] = 0.0, pv_max[sc, p, t]


def add_network_constraints(model: MipModel, instance: ProblemInstance) -> None:
    """LinDistFlow: line limits, bus P/Q balance and voltage drop per scenario and timestep."""
    dn = instance.grid.network
    report = validate_radial(dn)
    if not report.ok:
        raise GridError("distribution network is not radial: " + "; ".join(report.diagnostics))

    index = model.index
    position = dn.bus_position
    s_base = dn.base_kva
    v_ref = dn.v_ref
    v_low, v_high = VOLTAGE_BAND
    gens_at = {b: [u for u, g in enumerate(instance.grid.generators) if g.bus == b] for b in dn.buses}
    pvs_at = {b: [p for p, pv in enumerate(instance.grid.pv_units) if pv.bus == b] for b in dn.buses}
    lines_in = {b: [l.id for l in dn.lines if l.down == b] for b in dn.buses}
    lines_out = {b: [l.id for l in dn.lines if l.up == b] for b in dn.buses}
    stations_at = {b: [i for i, node in enumerate(index.stations)
                       if instance.grid.stations.bus_of(node) == b] for b in dn.buses}

    for sc in range(index.scenarios):
        for t in range(index.timesteps):
            for line in dn.lines:
                pf, qf = index.var("Pf", sc, line.id, t), index.var("Qf", sc, line.id, t)
                model.lb[pf], model.ub[pf] = -line.p_max, line.p_max
                model.lb[qf], model.ub[qf] = -line.q_max, line.q_max
                cols = [index.var("V", sc, position[line.up], t), index.var("V", sc, position[line.down], t),
                        pf, qf]
                coefs = [1.0, -1.0, -line.r / (s_base * v_ref), -line.x / (s_base * v_ref)]
                model.add_row(cols, coefs, 0.0, 0.0, "voltage_drop")

            for b in dn.buses:
                bp = position[b]
                cols = [index.var("Pg", sc, u, t) for u in gens_at[b]]
                cols += [index.var("Pv", sc, p, t) for p in pvs_at[b]]
                cols += [index.var("Pf", sc, l, t) for l in lines_in[b]]
                cols += [index.var("Pf", sc, l, t) for l in lines_out[b]]
                coefs = [1.0] * (len(gens_at[b]) + len(pvs_at[b]) + len(lines_in[b]))
                coefs += [-1.0] * len(lines_out[b])
                if t >= 1:
                    for k in range(index.evs):
                        for i in stations_at[b]:
                            cols += [index.var("Pc", sc, k, i, t), index.var("Pd", sc, k, i, t)]
                            coefs += [-1.0, 1.0]
                load_p = instance.load_p[bp, t]
                model.add_row(cols, coefs, load_p, load_p, "p_balance")

                cols = [index.var("Qg", sc, u, t) for u in gens_at[b]]
                cols += [index.var("Qf", sc, l, t) for l in lines_in[b]]
                cols += [index.var("Qf", sc, l, t) for l in lines_out[b]]
                coefs = [1.0] * (len(gens_at[b]) + len(lines_in[b])) + [-1.0] * len(lines_out[b])
                load_q = instance.load_q[bp, t]
                model.add_row(cols, coefs, load_q, load_q, "q_balance")

                v = index.var("V", sc, bp, t)
                if b == dn.slack_bus:
                    model.lb[v] = model.ub[v] = v_ref
                else:
                    model.lb[v], model.ub[v] = v_low * v_ref, v_high * v_ref


# ---------------------------------------------------------------------------
# Fixing and solving
# ---------------------------------------------------------------------------

def fix_binaries(model: MipModel, assignment: PartialAssignment | dict) -> MipModel:
    """Copy of the model with the assigned binaries pinned; base bounds kept for unfixing."""
    if not isinstance(assignment, PartialAssignment):
        assignment = PartialAssignment(dict(assignment))
    assignment.validate(model)
    lb, ub = model.lb.copy(), model.ub.copy()
    fixed = dict(model.fixed)
    conflicts = list(model.conflicts)
    for j, v in assignment.values.items():
        if v < model.base_lb[j] or v > model.base_ub[j]:
            conflicts.append(f"{model.index.name(j)} fixed to {v} outside [{model.base_lb[j]:g}, "
                             f"{model.base_ub[j]:g}]")
            continue
        lb[j] = ub[j] = v
        fixed[int(j)] = int(v)
    return model.with_bounds(lb, ub, fixed, conflicts)


def unfix_binaries(model: MipModel) -> MipModel:
    return model.with_bounds(model.base_lb.copy(), model.base_ub.copy(), {}, [])


class SolverBackend(Protocol):
    def solve(self, model: MipModel, params: SolverParams) -> Solution: ...


class HighsBackend:
    """scipy.optimize.milp (HiGHS). Thread count and seed are recorded only."""

    name = "highs"

    def solve(self, model: MipModel, params: SolverParams) -> Solution:
        params.validate()
        if model.conflicts:
            logger.info("Fixing conflicts with model bounds: %s", model.conflicts[0])
            return Solution(None, None, "infeasible", 0.0, message="; ".join(model.conflicts),
                            threads=params.threads, seed=params.seed)

        constraints = None
        if model.n_rows:
            constraints = LinearConstraint(model.constraint_matrix(),
                                           np.asarray(model.row_lower), np.asarray(model.row_upper))
        options = {"mip_rel_gap": params.gap, "time_limit": params.time_limit,
                   "disp": params.verbose, "presolve": True}
        start = time.perf_counter()
        try:
            result = milp(model.objective, integrality=model.integrality,
                          bounds=Bounds(model.lb, model.ub), constraints=constraints, options=options)
        except Exception as exc:
            elapsed = time.perf_counter() - start
            logger.error("HiGHS raised %s: %s", type(exc).__name__, exc)
            return Solution(None, None, "error", elapsed, message=str(exc),
                            threads=params.threads, seed=params.seed)
        elapsed = time.perf_counter() - start

        x = result.x
        gap = getattr(result, "mip_gap", None)
        if result.status == 0:
            status = "gap-feasible" if gap is not None and gap > GAP_EPSILON else "optimal"
        elif result.status == 1:
            status = "time-limit-feasible" if x is not None else "timeout-no-solution"
        elif result.status == 2:
            status = "infeasible"
        else:
            status = "error"
        if status not in FEASIBLE_STATUSES:
            x = None
        if x is not None:
            x = np.array(x, dtype=float)
            binary = model.integrality.astype(bool)
            x[binary] = np.round(x[binary])
        objective = float(result.fun) if x is not None and result.fun is not None else None
        logger.debug("HiGHS finished: %s in %.2fs (%s)", status, elapsed, result.message)
        return Solution(values=x, objective=objective, status=status, solve_seconds=elapsed,
                        mip_gap=None if gap is None else float(gap), message=str(result.message),
                        threads=params.threads, seed=params.seed)


def solve(model: MipModel, backend: SolverBackend | None = None,
          params: SolverParams | None = None) -> Solution:
    return (backend or HighsBackend()).solve(model, params or SolverParams())


# ---------------------------------------------------------------------------
# Independent oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeasibilityReport:
    violations: dict  # family -> max relative violation
    tol: float

    @property
    def ok(self) -> bool:
        return all(v <= self.tol for v in self.violations.values())

    @property
    def failed(self) -> list[str]:
        return sorted(f for f, v in self.violations.items() if v > self.tol)

    def worst(self) -> tuple[str, float]:
        if not self.violations:
            return "", 0.0
        family = max(self.violations, key=self.violations.get)
        return family, self.violations[family]


def _max(values) -> float:
    values = np.asarray(values, dtype=float)
    return float(values.max()) if values.size else 0.0


def _relative(violation, scale) -> np.ndarray:
    return np.abs(violation) / np.maximum(1.0, np.abs(scale))


def check_feasible(instance: ProblemInstance, solution: Solution, tol: float = 1e-6) -> FeasibilityReport:
    """Substitute the solution into every constraint family and report the worst violations.

    `instance` must match the build (pass `instance.deterministic(sc)` for a
    deterministic solution).
    """
    if solution.values is None:
        raise ModelError(f"solution with status {solution.status} carries no values")
    index = VariableIndex.for_instance(instance)
    v = index.split(solution.values)
    tsn = instance.tsn
    fleet = instance.fleet
    grid = instance.grid
    dn = grid.network
    S, A, T = index.timespans, index.arcs, index.timesteps
    report: dict[str, float] = {}

    binaries = np.asarray(solution.values[:index.binary_count])
    report["integrality"] = _max(np.abs(binaries - np.round(binaries)))

    # routing
    I = v["I"]
    allowed = np.zeros((S, A), dtype=bool)
    for s in range(S):
        allowed[s, sorted(available_arcs(tsn, instance.congestion[s]))] = True
    report["route_avail"] = _max(np.abs(I * ~allowed))
    report["route_one"] = _max(np.abs((I * allowed).sum(axis=-1) - 1.0))
    out_mat = np.zeros((len(tsn.nodes), A))
    in_mat = np.zeros((len(tsn.nodes), A))
    for arc in tsn.arcs:
        out_mat[arc.source, arc.id] = 1.0
        in_mat[arc.target, arc.id] = 1.0
    outflow = I @ out_mat.T
    inflow = I @ in_mat.T
    report["flow"] = _max(np.abs(outflow[:, :, 1:, :] - inflow[:, :, :-1, :]))
    schedule_viol = [np.abs(outflow[:, k, s, tsn.position_of(node)] - 1.0)
                     for k, node, s in instance.schedule.triples if k < index.evs]
    report["schedule"] = _max(np.concatenate(schedule_viol)) if schedule_viol else 0.0

    # EV energy
    pmax = np.asarray(fleet.p_max, dtype=float)[None, :, None, None]
    Ic, Id, Pc, Pd, Pm, E = v["Ic"], v["Id"], v["Pc"], v["Pd"], v["Pm"], v["E"]
    if index.stations:
        stays = [tsn.stationary_arc_of[i] for i in index.stations]
        on_station = np.transpose(I[:, :, :, stays], (0, 1, 3, 2))
        report["station_gate"] = _max(np.maximum(0.0, Ic + Id - on_station))
    else:
        report["station_gate"] = 0.0
    report["charge_rate"] = _max(_relative(np.maximum(0.0, Pc - pmax * Ic), pmax)) if Pc.size else 0.0
    report["discharge_rate"] = _max(_relative(np.maximum(0.0, Pd - pmax * Id), pmax)) if Pd.size else 0.0
    report["power_sign"] = _max(np.maximum(0.0, -np.concatenate([Pc.ravel(), Pd.ravel(), Pm.ravel()])))
    nsa = np.zeros(A, dtype=bool)
    nsa[sorted(tsn.nsa)] = True
    travelling = (I * nsa).sum(axis=-1)
    report["move_power"] = _max(_relative(Pm - fleet.p_move * travelling, fleet.p_move))

    e_min = np.asarray(fleet.e_min, dtype=float)[None, :, None]
    e_max = np.asarray(fleet.e_max, dtype=float)[None, :, None]
    e_init = np.asarray(fleet.e_init, dtype=float)[None, :]
    report["energy_bounds"] = _max(_relative(np.maximum(0.0, np.maximum(e_min - E, E - e_max)), e_max))
    report["energy_init"] = _max(_relative(E[:, :, 0] - e_init, e_init)) if E.size else 0.0
    hours = 24.0 / T
    delta = E[:, :, 1:] - E[:, :, :-1] - hours * (
        (1.0 - fleet.eta) * Pc.sum(axis=2) - (1.0 + fleet.eta) * (Pd.sum(axis=2) + Pm))
    report["energy_balance"] = _max(_relative(delta, e_max))

    # generation
    Pg, Qg, Pv = v["Pg"], v["Qg"], v["Pv"]
    gens = grid.generators
    p_lo = np.array([g.p_min for g in gens])[None, :, None]
    p_hi = np.array([g.p_max for g in gens])[None, :, None]
    q_lo = np.array([g.q_min for g in gens])[None, :, None]
    q_hi = np.array([g.q_max for g in gens])[None, :, None]
    report["generation_bounds"] = max(
        _max(_relative(np.maximum(0.0, np.maximum(p_lo - Pg, Pg - p_hi)), p_hi)),
        _max(_relative(np.maximum(0.0, np.maximum(q_lo - Qg, Qg - q_hi)), q_hi)))
    pv_max = instance.scenarios.pv_max
    report["pv_bounds"] = _max(_relative(np.maximum(0.0, np.maximum(-Pv, Pv - pv_max)), pv_max))

    # network
    Pf, Qf, V = v["Pf"], v["Qf"], v["V"]
    lines = dn.lines
    f_p = np.array([l.p_max for l in lines])[None, :, None]
    f_q = np.array([l.q_max for l in lines])[None, :, None]
    report["line_limits"] = max(_max(_relative(np.maximum(0.0, np.abs(Pf) - f_p), f_p)),
                                _max(_relative(np.maximum(0.0, np.abs(Qf) - f_q), f_q)))
    position = dn.bus_position
    B = len(dn.buses)
    gen_bus = np.zeros((B, len(gens)))
    for u, g in enumerate(gens):
        gen_bus[position[g.bus], u] = 1.0
    pv_bus = np.zeros((B, len(grid.pv_units)))
    for p, pv in enumerate(grid.pv_units):
        pv_bus[position[pv.bus], p] = 1.0
    line_net = np.zeros((B, len(lines)))
    for line in lines:
        line_net[position[line.down], line.id] += 1.0
        line_net[position[line.up], line.id] -= 1.0
    station_bus = np.zeros((B, len(index.stations)))
    for i, node in enumerate(index.stations):
        station_bus[position[grid.stations.bus_of(node)], i] = 1.0
    ev_net = np.zeros((index.scenarios, len(index.stations), T))
    ev_net[:, :, 1:] = (Pc - Pd).sum(axis=1)
    p_lhs = (np.einsum("bu,sut->sbt", gen_bus, Pg) + np.einsum("bp,spt->sbt", pv_bus, Pv)
             + np.einsum("bl,slt->sbt", line_net, Pf) - np.einsum("bi,sit->sbt", station_bus, ev_net))
    report["p_balance"] = _max(_relative(p_lhs - instance.load_p[None], instance.load_p[None]))
    q_lhs = np.einsum("bu,sut->sbt", gen_bus, Qg) + np.einsum("bl,slt->sbt", line_net, Qf)
    report["q_balance"] = _max(_relative(q_lhs - instance.load_q[None], instance.load_q[None]))

    if lines:
        up = [position[l.up] for l in lines]
        down = [position[l.down] for l in lines]
        r = np.array([l.r for l in lines])[None, :, None]
        x = np.array([l.x for l in lines])[None, :, None]
        drop = V[:, up, :] - V[:, down, :] - (r * Pf + x * Qf) / (dn.base_kva * dn.v_ref)
        report["voltage_drop"] = _max(np.abs(drop))
    else:
        report["voltage_drop"] = 0.0
    v_low, v_high = VOLTAGE_BAND
    report["voltage_bounds"] = _max(np.maximum(0.0, np.maximum(v_low * dn.v_ref - V, V - v_high * dn.v_ref)))
    report["slack_voltage"] = _max(np.abs(V[:, position[dn.slack_bus], :] - dn.v_ref))

    return FeasibilityReport(report, tol)


def objective_value(instance: ProblemInstance, solution: Solution) -> float:
    """Scenario-weighted generation, travel and net charging cost recomputed from the values."""
    if solution.values is None:
        raise ModelError(f"solution with status {solution.status} carries no values")
    index = VariableIndex.for_instance(instance)
    v = index.split(solution.values)
    costs = instance.costs
    gen_cost = np.array([g.cost for g in instance.grid.generators])
    nsa = sorted(instance.tsn.nsa)
    total = 0.0
    for sc, p in enumerate(instance.scenarios.probabilities):
        generation = float((gen_cost[:, None] * v["Pg"][sc]).sum()) if gen_cost.size else 0.0
        travel = costs.travel * float(v["I"][sc][..., nsa].sum())
        charging = costs.charge * float(v["Pc"][sc].sum()) - costs.discharge * float(v["Pd"][sc].sum())
        total += p * (generation + travel + charging)
    return total


# ---------------------------------------------------------------------------
# Audit helpers
# ---------------------------------------------------------------------------

def route_of(solution: Solution, index: VariableIndex, sc: int, k: int) -> list[tuple[int, int]]:
    """(timespan, arc id) actually taken by EV k in scenario sc."""
    if solution.values is None:
        return []
    routing = index.split(solution.values)["I"][sc, k]
    return [(s, int(np.argmax(routing[s]))) for s in range(index.timespans) if routing[s].max() >= 0.5]


def binary_vector(solution: Solution, index: VariableIndex) -> np.ndarray:
    if solution.values is None:
        raise ModelError(f"solution with status {solution.status} carries no values")
    return np.round(solution.values[:index.binary_count]).astype(np.int8)


def save_solution(path: str | Path, solution: Solution, index: VariableIndex) -> Path:
    """Status header plus every nonzero value keyed by its variable tuple name."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = {}
    if solution.values is not None:
        for j in np.flatnonzero(np.abs(solution.values) > 1e-9):
            values[index.name(int(j))] = float(solution.values[j])
    payload = {
        "status": solution.status,
        "objective": solution.objective,
        "solve_seconds": round(solution.solve_seconds, 6),
        "mip_gap": solution.mip_gap,
        "message": solution.message,
        "threads": solution.threads,
        "seed": solution.seed,
        "variable_count": index.size,
        "values": values,
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=1)
    return path
