#!/usr/bin/env python3
"""
Transport network and its congestion-aware time-space expansion.

Every directed physical arc of duration d becomes a free-flow chain of d arcs
and a congested alternative that detours through one virtual congestion node
(VCN) and takes d + delta timespans. The arc sets CA / NCA / NSA used by the
routing constraints are answered from the built network.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Hashable, Sequence

logger = logging.getLogger(__name__)

TRANSPORT_SCHEMA_VERSION = 1


class NetworkError(ValueError):
    """Invalid transport network or unknown time-space node."""


@dataclass(frozen=True)
class TransportNetwork:
    nodes: tuple[int, ...]
    physical_arcs: tuple[tuple[int, int, int], ...]
    station_nodes: frozenset[int] = frozenset()
    depot_nodes: frozenset[int] = frozenset()
    schedulable_nodes: frozenset[int] = frozenset()
    name: str = "transport"

    def validate(self) -> None:
        if not self.nodes:
            raise NetworkError("transport network has no nodes")
        if len(set(self.nodes)) != len(self.nodes):
            raise NetworkError("duplicate node ids in transport network")
        declared = set(self.nodes)
        for src, dst, duration in self.physical_arcs:
            if src not in declared or dst not in declared:
                raise NetworkError(f"arc {src}->{dst} has an unknown endpoint")
            if src == dst:
                raise NetworkError(f"arc {src}->{dst} is a self loop; idling arcs are implicit")
            if int(duration) < 1:
                raise NetworkError(f"arc {src}->{dst} has duration {duration} < 1")
        for label, subset in (("station", self.station_nodes),
                              ("depot", self.depot_nodes),
                              ("schedulable", self.schedulable_nodes)):
            unknown = set(subset) - declared
            if unknown:
                raise NetworkError(f"{label} nodes {sorted(unknown)} are not declared")

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": TRANSPORT_SCHEMA_VERSION,
            "name": self.name,
            "nodes": list(self.nodes),
            "arcs": [list(arc) for arc in self.physical_arcs],
            "stations": sorted(self.station_nodes),
            "depots": sorted(self.depot_nodes),
            "schedulable": sorted(self.schedulable_nodes),
        }


def transport_from_dict(data: dict[str, Any]) -> TransportNetwork:
    """Build a TransportNetwork from the documented JSON layout."""
    version = int(data.get("schema_version", TRANSPORT_SCHEMA_VERSION))
    if version != TRANSPORT_SCHEMA_VERSION:
        raise NetworkError(f"unsupported transport schema version {version}")
    arcs = []
    for entry in data.get("arcs", []):
        src, dst = int(entry[0]), int(entry[1])
        duration = int(entry[2]) if len(entry) > 2 else 1
        arcs.append((src, dst, duration))
        if data.get("bidirectional", False):
            arcs.append((dst, src, duration))
    # duplicates collapse onto the first declaration
    unique = list(dict.fromkeys((a[0], a[1]) for a in arcs))
    first_duration = {}
    for src, dst, duration in arcs:
        first_duration.setdefault((src, dst), duration)
    network = TransportNetwork(
        nodes=tuple(int(n) for n in data.get("nodes", [])),
        physical_arcs=tuple((s, d, first_duration[(s, d)]) for s, d in unique),
        station_nodes=frozenset(int(n) for n in data.get("stations", [])),
        depot_nodes=frozenset(int(n) for n in data.get("depots", [])),
        schedulable_nodes=frozenset(int(n) for n in data.get("schedulable", [])),
        name=str(data.get("name", "transport")),
    )
    network.validate()
    return network


def load_transport_network(path: str | Path) -> TransportNetwork:
    """Read a transport network file (JSON)."""
    path = Path(path)
    with open(path, "r") as f:
        data = json.load(f)
    network = transport_from_dict(data)
    logger.info("Loaded transport network %s: %d nodes, %d arcs, %d stations",
                network.name, len(network.nodes), len(network.physical_arcs),
                len(network.station_nodes))
    return network


@dataclass(frozen=True)
class TsnNode:
    key: Hashable
    kind: str  # physical | chain | vcn | congestion
    position: int
    physical_arc: tuple[int, int] | None = None


@dataclass(frozen=True)
class TsnArc:
    id: int
    source: int  # node position
    target: int
    kind: str  # stay | direct | chain | entry | exit | detour
    stationary: bool
    in_ca: bool
    in_nca: bool
    vcn_entry: bool = False
    vcn_exit: bool = False
    physical_arc: tuple[int, int] | None = None
    chain_position: int = 0

    @property
    def in_nsa(self) -> bool:
        return not self.stationary


@dataclass(frozen=True)
class TimeSpaceNetwork:
    transport: TransportNetwork
    timestep_count: int
    congestion_delta: int
    nodes: tuple[TsnNode, ...]
    arcs: tuple[TsnArc, ...]
    node_position: dict = field(repr=False)
    out_arcs: tuple[tuple[int, ...], ...] = field(repr=False)
    in_arcs: tuple[tuple[int, ...], ...] = field(repr=False)
    ca: frozenset[int] = field(repr=False)
    nca: frozenset[int] = field(repr=False)
    nsa: frozenset[int] = field(repr=False)
    stationary: frozenset[int] = field(repr=False)
    stationary_arc_of: dict = field(repr=False)

    @property
    def timespan_count(self) -> int:
        return self.timestep_count - 1

    @property
    def arc_count(self) -> int:
        return len(self.arcs)

    def position_of(self, node: Hashable) -> int:
        try:
            return self.node_position[node]
        except KeyError:
            raise NetworkError(f"unknown time-space node {node!r}") from None


def _virtual_key(kind: str, src: int, dst: int, step: int | None = None) -> str:
    if step is None:
        return f"{kind}:{src}->{dst}"
    return f"{kind}:{src}->{dst}#{step}"


def build_tsn(tn: TransportNetwork, timesteps: int, delta_spans: int = 1) -> TimeSpaceNetwork:
    """Expand the transport network into its VCN-augmented time-space network."""
    tn.validate()
    if int(timesteps) < 2:
        raise NetworkError(f"need at least 2 timesteps, got {timesteps}")
    if int(delta_spans) < 1:
        raise NetworkError(f"congestion delta must be >= 1 timespan, got {delta_spans}")

    nodes: list[TsnNode] = []
    position: dict[Hashable, int] = {}

    def add_node(key, kind, physical_arc=None):
        position[key] = len(nodes)
        nodes.append(TsnNode(key=key, kind=kind, position=len(nodes), physical_arc=physical_arc))
        return position[key]

    for n in tn.nodes:
        add_node(n, "physical")

    # (source, target, kind, chain position, flags)
    pending = []
    for n in tn.nodes:
        p = position[n]
        pending.append((p, p, "stay", 0, dict(stationary=True, in_ca=True, in_nca=True), None))

    for src, dst, duration in tn.physical_arcs:
        pair = (src, dst)
        chain = [position[src]]
        for step in range(1, duration):
            chain.append(add_node(_virtual_key("chain", src, dst, step), "chain", pair))
        chain.append(position[dst])
        for step in range(duration):
            # only the departure arc belongs to the free-flow state; arcs further
            # down the chain stay open so a trip under way can always finish
            first = step == 0
            flags = dict(stationary=False, in_ca=not first, in_nca=True)
            pending.append((chain[step], chain[step + 1], "direct" if first else "chain", step, flags, pair))

        vcn = add_node(_virtual_key("vcn", src, dst), "vcn", pair)
        detour = [vcn]
        for step in range(1, delta_spans):
            detour.append(add_node(_virtual_key("congestion", src, dst, step), "congestion", pair))
        # re-joins the free-flow chain after its first arc
        detour.append(chain[1])
        pending.append((position[src], vcn, "entry", 0,
                        dict(stationary=False, in_ca=True, in_nca=False, vcn_entry=True), pair))
        for step in range(delta_spans):
            flags = dict(stationary=False, in_ca=True, in_nca=True, vcn_exit=(step == 0))
            pending.append((detour[step], detour[step + 1], "exit" if step == 0 else "detour",
                            step + 1, flags, pair))

    pending.sort(key=lambda item: (item[0], item[1], item[3]))
    arcs = []
    for arc_id, (src, dst, kind, chain_pos, flags, pair) in enumerate(pending):
        arcs.append(TsnArc(id=arc_id, source=src, target=dst, kind=kind,
                           chain_position=chain_pos, physical_arc=pair, **flags))

    out_arcs = [[] for _ in nodes]
    in_arcs = [[] for _ in nodes]
    for arc in arcs:
        out_arcs[arc.source].append(arc.id)
        in_arcs[arc.target].append(arc.id)

    for node in nodes:
        if node.kind != "physical" and not out_arcs[node.position]:
            raise NetworkError(f"virtual node {node.key} has no outgoing arc")

    tsn = TimeSpaceNetwork(
        transport=tn,
        timestep_count=int(timesteps),
        congestion_delta=int(delta_spans),
        nodes=tuple(nodes),
        arcs=tuple(arcs),
        node_position=position,
        out_arcs=tuple(tuple(a) for a in out_arcs),
        in_arcs=tuple(tuple(a) for a in in_arcs),
        ca=frozenset(a.id for a in arcs if a.in_ca),
        nca=frozenset(a.id for a in arcs if a.in_nca),
        nsa=frozenset(a.id for a in arcs if a.in_nsa),
        stationary=frozenset(a.id for a in arcs if a.stationary),
        stationary_arc_of={nodes[a.source].key: a.id for a in arcs if a.stationary},
    )
    logger.debug("Built TSN: %d nodes, %d arcs, %d timespans",
                 len(tsn.nodes), tsn.arc_count, tsn.timespan_count)
    return tsn


def available_arcs(tsn: TimeSpaceNetwork, congested: bool | int) -> frozenset[int]:
    """Arcs an EV may take during a timespan with congestion flag j_s."""
    return tsn.ca if int(congested) else tsn.nca


def flow_pairs(tsn: TimeSpaceNetwork) -> list[tuple[frozenset[int], frozenset[int]]]:
    """One (arcs into node, arcs out of node) pair per augmented node."""
    return [(frozenset(tsn.in_arcs[p]), frozenset(tsn.out_arcs[p])) for p in range(len(tsn.nodes))]


def arcs_from(tsn: TimeSpaceNetwork, node: Hashable) -> frozenset[int]:
    """A^{i+}: all arcs leaving the given augmented node."""
    return frozenset(tsn.out_arcs[tsn.position_of(node)])


def reachable_within(tsn: TimeSpaceNetwork, congestion: Sequence[int], origin: int,
                     start_span: int, end_span: int) -> set[int]:
    """Physical nodes an EV departing origin at start_span can depart from at end_span."""
    frontier = {tsn.position_of(origin)}
    for s in range(start_span, end_span):
        allowed = available_arcs(tsn, congestion[s])
        frontier = {tsn.arcs[a].target for p in frontier for a in tsn.out_arcs[p] if a in allowed}
        if not frontier:
            break
    return {tsn.nodes[p].key for p in frontier if tsn.nodes[p].kind == "physical"}


def tsn_summary(tsn: TimeSpaceNetwork) -> dict[str, int]:
    kinds: dict[str, int] = {}
    for node in tsn.nodes:
        kinds[node.kind] = kinds.get(node.kind, 0) + 1
    return {
        "physical_nodes": kinds.get("physical", 0),
        "chain_nodes": kinds.get("chain", 0),
        "vcn_nodes": kinds.get("vcn", 0),
        "congestion_nodes": kinds.get("congestion", 0),
        "arcs": tsn.arc_count,
        "stationary_arcs": len(tsn.stationary),
        "nsa_arcs": len(tsn.nsa),
        "ca_only_arcs": len(tsn.ca - tsn.nca),
        "nca_only_arcs": len(tsn.nca - tsn.ca),
        "shared_arcs": len(tsn.ca & tsn.nca),
        "timespans": tsn.timespan_count,
    }

