#!/usr/bin/env python3
"""
Radial distribution network data model.

Buses, lines, generators, PV units and the station-to-bus coupling consumed by
the LinDistFlow constraints. Line impedances are held in per-unit.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import networkx as nx

logger = logging.getLogger(__name__)

GRID_SCHEMA_VERSION = 1


class GridError(ValueError):
    """Invalid distribution network data."""


@dataclass(frozen=True)
class Line:
    id: int
    up: int
    down: int
    r: float  # per-unit
    x: float  # per-unit
    p_max: float  # kW
    q_max: float  # kvar


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost: float  # currency per kW-step (c^f)

    def validate(self, buses) -> None:
        if self.bus not in buses:
            raise GridError(f"generator at unknown bus {self.bus}")
        if self.p_min > self.p_max or self.q_min > self.q_max:
            raise GridError(f"generator at bus {self.bus} has min > max")
        if self.cost < 0:
            raise GridError(f"generator at bus {self.bus} has negative cost")


@dataclass(frozen=True)
class PvUnit:
    id: int
    bus: int
    panel_max: float  # kW


@dataclass(frozen=True)
class StationPlacement:
    mapping: dict = field(default_factory=dict)  # transport station node -> bus

    def bus_of(self, node: int) -> int:
        return self.mapping[node]

    def validate(self, station_nodes, buses) -> None:
        missing = sorted(set(station_nodes) - set(self.mapping))
        if missing:
            raise GridError(f"station nodes {missing} have no bus mapping")
        for node, bus in self.mapping.items():
            if bus not in buses:
                raise GridError(f"station node {node} mapped to unknown bus {bus}")

    def restricted_to(self, station_nodes) -> "StationPlacement":
        return StationPlacement({n: b for n, b in self.mapping.items() if n in set(station_nodes)})


@dataclass(frozen=True)
class DistributionNetwork:
    buses: tuple[int, ...]
    lines: tuple[Line, ...]
    slack_bus: int
    base_load_p: dict = field(default_factory=dict)  # bus -> kW at peak
    base_load_q: dict = field(default_factory=dict)  # bus -> kvar at peak
    base_kv: float = 12.66
    base_kva: float = 10000.0
    v_ref: float = 1.0
    name: str = "grid"

    @property
    def bus_position(self) -> dict:
        return {b: i for i, b in enumerate(self.buses)}

    def validate(self) -> None:
        if self.slack_bus not in self.buses:
            raise GridError(f"slack bus {self.slack_bus} is not a declared bus")
        for line in self.lines:
            if line.r < 0 or line.x < 0:
                raise GridError(f"line {line.up}-{line.down} has negative impedance")
            if line.p_max <= 0 or line.q_max <= 0:
                raise GridError(f"line {line.up}-{line.down} has non-positive flow limit")
        if self.v_ref <= 0 or self.base_kva <= 0:
            raise GridError("v_ref and base_kva must be positive")


@dataclass(frozen=True)
class RadialityReport:
    diagnostics: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.diagnostics


def validate_radial(dn: DistributionNetwork) -> RadialityReport:
    """Tree-rooted-at-slack check; problems come back as diagnostics, not exceptions."""
    diagnostics = []
    buses = set(dn.buses)
    directed = nx.DiGraph()
    directed.add_nodes_from(dn.buses)
    undirected = nx.MultiGraph()
    undirected.add_nodes_from(dn.buses)
    for line in dn.lines:
        if line.up not in buses or line.down not in buses:
            diagnostics.append(f"line {line.id} ({line.up}-{line.down}) references an unknown bus")
            continue
        directed.add_edge(line.up, line.down)
        undirected.add_edge(line.up, line.down)

    if dn.slack_bus not in buses:
        diagnostics.append(f"slack bus {dn.slack_bus} is not declared")
        return RadialityReport(tuple(diagnostics))

    if directed.in_degree(dn.slack_bus) > 0:
        diagnostics.append(f"slack bus {dn.slack_bus} has an upstream line")
    for bus in dn.buses:
        if bus != dn.slack_bus and directed.in_degree(bus) > 1:
            diagnostics.append(f"bus {bus} has {directed.in_degree(bus)} upstream lines")

    try:
        cycle = nx.find_cycle(undirected)
        path = [edge[0] for edge in cycle] + [cycle[-1][1]]
        diagnostics.append("cycle through buses " + "-".join(str(b) for b in path))
    except nx.NetworkXNoCycle:
        pass

    reachable = nx.descendants(directed, dn.slack_bus) | {dn.slack_bus}
    for bus in dn.buses:
        if bus not in reachable:
            diagnostics.append(f"bus {bus} unreachable")
    return RadialityReport(tuple(diagnostics))


def bus_topology(dn: DistributionNetwork) -> tuple[dict, dict]:
    """(upstream line per bus, downstream line ids per bus)."""
    upstream = {}
    downstream = {b: [] for b in dn.buses}
    for line in dn.lines:
        upstream[line.down] = line.id
        downstream[line.up].append(line.id)
    return upstream, downstream


@dataclass(frozen=True)
class GridData:
    network: DistributionNetwork
    generators: tuple[Generator, ...]
    pv_units: tuple[PvUnit, ...]
    stations: StationPlacement

    def to_dict(self) -> dict[str, Any]:
        dn = self.network
        return {
            "schema_version": GRID_SCHEMA_VERSION,
            "name": dn.name,
            "base_kv": dn.base_kv,
            "base_kva": dn.base_kva,
            "v_ref": dn.v_ref,
            "slack_bus": dn.slack_bus,
            "impedance_unit": "pu",
            "buses": [[b, dn.base_load_p.get(b, 0.0), dn.base_load_q.get(b, 0.0)] for b in dn.buses],
            "lines": [[l.up, l.down, l.r, l.x, l.p_max, l.q_max] for l in dn.lines],
            "generators": [vars(g) for g in self.generators],
            "pv_units": [vars(p) for p in self.pv_units],
            "station_map": {str(n): b for n, b in self.stations.mapping.items()},
        }


def grid_from_dict(data: dict[str, Any], station_map: dict | None = None) -> GridData:
    version = int(data.get("schema_version", GRID_SCHEMA_VERSION))
    if version != GRID_SCHEMA_VERSION:
        raise GridError(f"unsupported grid schema version {version}")
    base_kv = float(data.get("base_kv", 12.66))
    base_kva = float(data.get("base_kva", 10000.0))
    unit = data.get("impedance_unit", "pu")
    if unit == "ohm":
        z_base = base_kv ** 2 * 1000.0 / base_kva
    elif unit == "pu":
        z_base = 1.0
    else:
        raise GridError(f"impedance_unit must be 'ohm' or 'pu', got {unit!r}")
    limits = data.get("default_line_limits", {})
    lines = []
    for i, entry in enumerate(data.get("lines", [])):
        p_max = float(entry[4]) if len(entry) > 4 else float(limits.get("p_max_kw", 1e4))
        q_max = float(entry[5]) if len(entry) > 5 else float(limits.get("q_max_kvar", 1e4))
        lines.append(Line(id=i, up=int(entry[0]), down=int(entry[1]),
                          r=float(entry[2]) / z_base, x=float(entry[3]) / z_base,
                          p_max=p_max, q_max=q_max))
    buses = tuple(int(b[0]) for b in data.get("buses", []))
    network = DistributionNetwork(
        buses=buses,
        lines=tuple(lines),
        slack_bus=int(data.get("slack_bus", buses[0] if buses else 1)),
        base_load_p={int(b[0]): float(b[1]) for b in data.get("buses", [])},
        base_load_q={int(b[0]): float(b[2]) for b in data.get("buses", [])},
        base_kv=base_kv,
        base_kva=base_kva,
        v_ref=float(data.get("v_ref", 1.0)),
        name=str(data.get("name", "grid")),
    )
    network.validate()
    generators = tuple(Generator(bus=int(g["bus"]), p_min=float(g["p_min"]), p_max=float(g["p_max"]),
                                 q_min=float(g["q_min"]), q_max=float(g["q_max"]),
                                 cost=float(g.get("cost", 0.0)))
                       for g in data.get("generators", []))
    for gen in generators:
        gen.validate(set(buses))
    pv_units = tuple(PvUnit(id=int(p["id"]), bus=int(p["bus"]), panel_max=float(p["panel_max"]))
                     for p in data.get("pv_units", []))
    for pv in pv_units:
        if pv.bus not in buses:
            raise GridError(f"PV unit {pv.id} at unknown bus {pv.bus}")
    raw_map = station_map if station_map is not None else data.get("station_map", {})
    stations = StationPlacement({int(n): int(b) for n, b in raw_map.items()})
    return GridData(network=network, generators=generators, pv_units=pv_units, stations=stations)


def load_distribution_network(path: str | Path, station_map: dict | None = None) -> GridData:
    """Read a distribution network file; an explicit station_map replaces the file's."""
    with open(Path(path), "r") as f:
        data = json.load(f)
    grid = grid_from_dict(data, station_map)
    report = validate_radial(grid.network)
    if not report.ok:
        logger.warning("Network %s is not radial: %s", grid.network.name, "; ".join(report.diagnostics))
    logger.info("Loaded distribution network %s: %d buses, %d lines, %d generators, %d PV units",
                grid.network.name, len(grid.network.buses), len(grid.network.lines),
                len(grid.generators), len(grid.pv_units))
    return grid
