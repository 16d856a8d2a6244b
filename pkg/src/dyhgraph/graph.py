"""Unrolled dynamic heterogeneous graphs built from event logs.

An event log is a list of (target, linker, relation, week, day) records.  The
unrolled graph materializes one replica node per (entity, week-snapshot) the
entity appears in, plus a single hub node per entity; each replica is tied to
its entity's hub by a temporal edge.  Structural edges live inside one
snapshot and are stored in both directions; temporal edges are stored once and
expanded to both directions when an adjacency is requested.

Node ordering is deterministic: replicas sorted by (type, entity id,
snapshot), then hubs sorted by (type, entity id).  Rebuilding from a shuffled
event log therefore yields identical node ids and adjacency.

Week/day convention: week ``t`` covers days ``7*(t-1)+1 .. 7*t`` (weekdays are
1-based), so e.g. day 63 falls in week 9.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, ValidationError
from .tensor import SparseMatrix

TEMPORAL_RELATION = "temporal"

EDGE_SETS = ("structural", "temporal", "union")


@dataclass(frozen=True, order=True)
class EntityRef:
    """A typed entity identity, shared by all of its snapshot replicas."""

    node_type: str
    entity_id: int


@dataclass(frozen=True)
class EventRecord:
    """One observed link between a target and a linker entity.

    ``week`` is the snapshot index (1-based); ``day`` is the absolute day and
    must fall inside that week.
    """

    target: EntityRef
    linker: EntityRef
    relation: str
    week: int
    day: int


def week_of_day(day: int) -> int:
    """Snapshot index for an absolute day (day 1..7 -> week 1)."""
    return (int(day) + 6) // 7


@dataclass
class LabelSet:
    """Per-target supervision: binary flag, optional risk level, features.

    Invariant: when risk levels are present, ``risk_level > 0`` exactly for
    the targets with ``binary == 1``.
    """

    binary: dict[EntityRef, int]
    risk_level: dict[EntityRef, int] | None = None
    features: dict[EntityRef, np.ndarray] = field(default_factory=dict)
    feature_dim: int = 0

    def __post_init__(self):
        for ent, flag in self.binary.items():
            if flag not in (0, 1):
                raise ValidationError(f"binary label for {ent} must be 0/1, got {flag!r}")
        if self.risk_level is not None:
            for ent, level in self.risk_level.items():
                flag = self.binary.get(ent)
                if flag is None:
                    raise ValidationError(f"risk level given for unlabeled entity {ent}")
                if (level > 0) != (flag == 1):
                    raise ValidationError(
                        f"risk level {level} inconsistent with binary label {flag} for {ent}"
                    )
        if self.features:
            dims = {v.shape[0] for v in self.features.values()}
            if len(dims) > 1:
                raise ValidationError(f"feature vectors have mixed lengths: {sorted(dims)}")
            dim = dims.pop()
            if self.feature_dim and self.feature_dim != dim:
                raise ValidationError(
                    f"feature_dim={self.feature_dim} but vectors have length {dim}"
                )
            self.feature_dim = dim

    @property
    def has_risk(self) -> bool:
        return self.risk_level is not None


@dataclass
class UnrolledGraph:
    """The unrolled graph plus aligned label/feature arrays.

    Replica nodes occupy ids ``0 .. hub_offset-1``; hub nodes follow.  Events
    are kept in a canonical order sorted by (week, day, target, linker,
    relation); structural edge arrays double every event into both directions.
    """

    T: int
    entities: list[EntityRef]
    entity_index: dict[EntityRef, int]
    relations: list[str]
    relation_index: dict[str, int]
    replica_entity: np.ndarray  # entity index per replica node
    replica_snapshot: np.ndarray  # snapshot per replica node
    hub_offset: int
    node_types: list[str]  # per node-type code per node
    # canonical per-event arrays
    event_target_node: np.ndarray
    event_linker_node: np.ndarray
    event_relation: np.ndarray
    event_week: np.ndarray
    event_day: np.ndarray
    # directed structural edge arrays (each event twice)
    structural_src: np.ndarray
    structural_dst: np.ndarray
    structural_rel: np.ndarray
    # temporal star edges, stored once
    temporal_replica: np.ndarray
    temporal_hub: np.ndarray
    features: np.ndarray
    target_entities: list[EntityRef]
    target_nodes: np.ndarray
    binary_labels: np.ndarray
    risk_labels: np.ndarray | None

    @property
    def n_nodes(self) -> int:
        return len(self.node_types)

    @property
    def n_replicas(self) -> int:
        return self.hub_offset

    @property
    def n_events(self) -> int:
        return len(self.event_week)

    @property
    def temporal_edge_count(self) -> int:
        return len(self.temporal_replica)

    def node_type_array(self) -> np.ndarray:
        """Node type as an integer code per node, types sorted alphabetically."""
        types = sorted(set(self.node_types))
        lookup = {name: i for i, name in enumerate(types)}
        return np.array([lookup[nt] for nt in self.node_types], dtype=np.int64)

    def target_creation_times(self) -> tuple[np.ndarray, np.ndarray]:
        """(week, day) of each target's earliest event, aligned with
        ``target_entities``.  Events are canonically ordered, so the first
        event seen per target is its earliest."""
        first: dict[int, int] = {}
        for k in range(self.n_events):
            ent = int(self.replica_entity[self.event_target_node[k]])
            if ent not in first:
                first[ent] = k
        weeks = np.empty(len(self.target_entities), dtype=np.int64)
        days = np.empty(len(self.target_entities), dtype=np.int64)
        for pos, e in enumerate(self.target_entities):
            k = first[self.entity_index[e]]
            weeks[pos] = self.event_week[k]
            days[pos] = self.event_day[k]
        return weeks, days


def _validate_events(events: Sequence[EventRecord], labels: LabelSet, T: int) -> None:
    relation_pairs: dict[str, tuple[str, str]] = {}
    for k, ev in enumerate(events):
        where = f"event #{k} ({ev.target} -[{ev.relation}]- {ev.linker})"
        if not (1 <= ev.week <= T):
            raise ValidationError(f"{where}: week {ev.week} outside [1, {T}]")
        if week_of_day(ev.day) != ev.week:
            raise ValidationError(
                f"{where}: day {ev.day} falls in week {week_of_day(ev.day)}, not {ev.week}"
            )
        if ev.relation == TEMPORAL_RELATION:
            raise ValidationError(
                f"{where}: relation name {TEMPORAL_RELATION!r} is reserved"
            )
        pair = (ev.target.node_type, ev.linker.node_type)
        seen = relation_pairs.setdefault(ev.relation, pair)
        if seen != pair:
            raise ValidationError(
                f"{where}: relation {ev.relation!r} joins {pair}, previously {seen}"
            )
        if ev.target not in labels.binary:
            raise ValidationError(f"{where}: target entity has no label")


def build_unrolled_graph(
    events: Sequence[EventRecord], labels: LabelSet, T: int
) -> UnrolledGraph:
    """Unroll an event log into snapshot replicas and per-entity hubs.

    Every entity gets one replica per distinct snapshot it appears in and one
    hub joined to each of its replicas by a temporal edge.  Target entities
    take their label and feature vector on their earliest replica; all other
    nodes carry zero features.
    """
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    events = list(events)
    _validate_events(events, labels, T)

    ordered = sorted(
        range(len(events)),
        key=lambda k: (
            events[k].week,
            events[k].day,
            events[k].target,
            events[k].linker,
            events[k].relation,
        ),
    )
    events = [events[k] for k in ordered]

    appearances: set[tuple[EntityRef, int]] = set()
    entity_set: set[EntityRef] = set()
    for ev in events:
        appearances.add((ev.target, ev.week))
        appearances.add((ev.linker, ev.week))
        entity_set.add(ev.target)
        entity_set.add(ev.linker)

    entities = sorted(entity_set)
    entity_index = {e: i for i, e in enumerate(entities)}
    replicas = sorted(appearances, key=lambda pair: (pair[0], pair[1]))
    replica_id = {pair: i for i, pair in enumerate(replicas)}
    hub_offset = len(replicas)
    hub_id = {e: hub_offset + i for i, e in enumerate(entities)}

    node_types = [e.node_type for e, _ in replicas] + [e.node_type for e in entities]

    relations = sorted({ev.relation for ev in events})
    relation_index = {r: i for i, r in enumerate(relations)}

    event_target_node = np.array(
        [replica_id[(ev.target, ev.week)] for ev in events], dtype=np.int64
    )
    event_linker_node = np.array(
        [replica_id[(ev.linker, ev.week)] for ev in events], dtype=np.int64
    )
    event_relation = np.array([relation_index[ev.relation] for ev in events], dtype=np.int64)
    event_week = np.array([ev.week for ev in events], dtype=np.int64)
    event_day = np.array([ev.day for ev in events], dtype=np.int64)

    structural_src = np.concatenate([event_target_node, event_linker_node])
    structural_dst = np.concatenate([event_linker_node, event_target_node])
    structural_rel = np.concatenate([event_relation, event_relation])

    temporal_replica = np.array(
        [replica_id[pair] for pair in replicas], dtype=np.int64
    )
    temporal_hub = np.array([hub_id[pair[0]] for pair in replicas], dtype=np.int64)

    first_week: dict[EntityRef, int] = {}
    for ev in events:
        seen = first_week.get(ev.target)
        if seen is None or ev.week < seen:
            first_week[ev.target] = ev.week
    target_entities = sorted(first_week)
    target_nodes = np.array(
        [replica_id[(e, first_week[e])] for e in target_entities], dtype=np.int64
    )

    n_nodes = len(replicas) + len(entities)
    features = np.zeros((n_nodes, labels.feature_dim))
    for pos, e in enumerate(target_entities):
        vec = labels.features.get(e)
        if vec is not None:
            features[target_nodes[pos]] = vec

    binary = np.array([labels.binary[e] for e in target_entities], dtype=np.int64)
    risk = None
    if labels.has_risk:
        risk = np.array(
            [labels.risk_level.get(e, 0) for e in target_entities], dtype=np.int64
        )

    return UnrolledGraph(
        T=T,
        entities=entities,
        entity_index=entity_index,
        relations=relations,
        relation_index=relation_index,
        replica_entity=np.array([entity_index[e] for e, _ in replicas], dtype=np.int64),
        replica_snapshot=np.array([w for _, w in replicas], dtype=np.int64),
        hub_offset=hub_offset,
        node_types=node_types,
        event_target_node=event_target_node,
        event_linker_node=event_linker_node,
        event_relation=event_relation,
        event_week=event_week,
        event_day=event_day,
        structural_src=structural_src,
        structural_dst=structural_dst,
        structural_rel=structural_rel,
        temporal_replica=temporal_replica,
        temporal_hub=temporal_hub,
        features=features,
        target_entities=target_entities,
        target_nodes=target_nodes,
        binary_labels=binary,
        risk_labels=risk,
    )


def directed_edges(graph: UnrolledGraph, edge_set: str) -> tuple[np.ndarray, np.ndarray]:
    """Directed (src, dst) arrays for one of the named edge sets."""
    if edge_set not in EDGE_SETS:
        raise ConfigurationError(
            f"edge_set must be one of {EDGE_SETS}, got {edge_set!r}"
        )
    parts_src, parts_dst = [], []
    if edge_set in ("structural", "union"):
        parts_src.append(graph.structural_src)
        parts_dst.append(graph.structural_dst)
    if edge_set in ("temporal", "union"):
        parts_src.extend([graph.temporal_replica, graph.temporal_hub])
        parts_dst.extend([graph.temporal_hub, graph.temporal_replica])
    return np.concatenate(parts_src), np.concatenate(parts_dst)


def normalized_adjacency(graph: UnrolledGraph, edge_set: str = "union") -> SparseMatrix:
    """Symmetrically normalized adjacency with self-loops over all nodes.

    A is the binary adjacency of the chosen edge set (duplicates collapse)
    plus the identity; the result is D^-1/2 (A + I) D^-1/2 as a sparse matrix
    over the full node set, isolated nodes included.
    """
    n = graph.n_nodes
    src, dst = directed_edges(graph, edge_set)
    loops = np.arange(n, dtype=np.int64)
    src = np.concatenate([src, loops])
    dst = np.concatenate([dst, loops])
    pairs = np.unique(np.stack([src, dst], axis=1), axis=0)
    a = sp.csr_matrix(
        (np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n)
    )
    deg = np.asarray(a.sum(axis=1)).reshape(-1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    d_half = sp.diags(inv_sqrt)
    return SparseMatrix(d_half @ a @ d_half)


def graph_statistics(graph: UnrolledGraph) -> dict:
    """Entity/event tallies shaped like a dataset summary table.

    Entity counts are per type (not per replica); edge counts are one per
    event plus the temporal star edges, matching how production logs of this
    kind are usually summarized (order 1e5 entities / 3e5 edges at full
    scale).  Unrolled node counts are reported separately.
    """
    entities_by_type: dict[str, int] = {}
    for e in graph.entities:
        entities_by_type[e.node_type] = entities_by_type.get(e.node_type, 0) + 1
    events_by_relation = {
        rel: int((graph.event_relation == idx).sum())
        for rel, idx in graph.relation_index.items()
    }
    structural_events = int(graph.n_events)
    temporal = int(graph.temporal_edge_count)
    return {
        "entities_by_type": dict(sorted(entities_by_type.items())),
        "entity_total": len(graph.entities),
        "events_by_relation": dict(sorted(events_by_relation.items())),
        "structural_event_total": structural_events,
        "temporal_edge_count": temporal,
        "edge_total": structural_events + temporal,
        "replica_count": int(graph.n_replicas),
        "hub_count": len(graph.entities),
        "unrolled_node_count": int(graph.n_nodes),
    }
