"""Time-parameterized entity embeddings and their per-node aggregation.

Each entity owns an amplitude vector; the first ``floor(gamma * d)`` of its
components oscillate with entity-specific frequency/phase pairs, evaluated on
two clocks (week index and absolute day) whose activations are summed
elementwise.  The remaining components are static.  An edge's elementwise
product of source embedding, relation embedding and (optionally) destination
embedding is its message; per node, messages of incident structural edges are
folded by an LSTM over the event order, or by an elementwise mean, and the
result is concatenated to the feature table.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as t
from .errors import ConfigurationError, ValidationError
from .graph import EntityRef, UnrolledGraph
from .layers import LSTMCell
from .tensor import Tensor
from .validation import check_option, check_positive_int, check_unit_interval

__all__ = [
    "AGGREGATIONS",
    "SCORE_MODES",
    "DiachronicConfig",
    "DiachronicParams",
    "deemb",
    "de_distmult",
    "edge_messages",
    "build_x_de",
    "write_embedding_csv",
]

AGGREGATIONS = ("lstm", "mean")
SCORE_MODES = ("full_triple", "source_relation_only")

ACTIVATIONS = ("sine", "tanh", "sigmoid", "identity")


@dataclass
class DiachronicConfig:
    """Switches for the embedding module.

    ``gamma`` is the fraction of temporal components; ``scalar_scores``
    aggregates the per-edge scalar score instead of the elementwise product
    vector, shrinking the LSTM input to one column.
    """

    d: int = 60
    gamma: float = 0.5
    aggregation: str = "lstm"
    score_mode: str = "full_triple"
    relation_time_dependent: bool = False
    scalar_scores: bool = False
    activation: str = "sine"

    def __post_init__(self):
        self.d = check_positive_int("d", self.d)
        self.gamma = check_unit_interval("gamma", self.gamma)
        check_option("aggregation", self.aggregation, AGGREGATIONS)
        check_option("score_mode", self.score_mode, SCORE_MODES)
        check_option("activation", self.activation, ACTIVATIONS)

    @property
    def n_temporal(self) -> int:
        return int(self.gamma * self.d)


class _ClockTable:
    """Frequency/phase pairs for the week and day clocks of one table.

    Day clocks start at weekly harmonics with random phases: account activity
    rhythms are dominated by the 7-day cycle, and gradient descent adjusts
    phase and amplitude far more reliably than it discovers a frequency from
    a near-zero start.
    """

    def __init__(self, rows: int, n_temporal: int, rng: np.random.Generator):
        def table() -> Tensor:
            return Tensor(rng.normal(0.0, 0.1, (rows, n_temporal)), requires_grad=True)

        self.week_freq = table()
        self.week_phase = table()
        harmonics = 2.0 * np.pi / 7.0 * (1.0 + np.arange(n_temporal) % 3)
        self.day_freq = Tensor(
            harmonics + rng.normal(0.0, 0.02, (rows, n_temporal)), requires_grad=True
        )
        self.day_phase = Tensor(
            rng.uniform(-np.pi, np.pi, (rows, n_temporal)), requires_grad=True
        )

    def named_parameters(self):
        yield "week_freq", self.week_freq
        yield "week_phase", self.week_phase
        yield "day_freq", self.day_freq
        yield "day_phase", self.day_phase


def _embed_rows(
    amplitude: Tensor,
    clocks: _ClockTable | None,
    rows: np.ndarray,
    weeks: np.ndarray,
    days: np.ndarray,
    activation: str,
) -> Tensor:
    """Table rows evaluated at (week, day); shape (len(rows), d)."""
    a = t.gather_rows(amplitude, rows)
    if clocks is None:
        return a
    week_col = Tensor(weeks.reshape(-1, 1).astype(np.float64))
    day_col = Tensor(days.reshape(-1, 1).astype(np.float64))

    def season(freq: Tensor, phase: Tensor, clock: Tensor) -> Tensor:
        return t.elementwise_unary(
            t.add(t.mul(t.gather_rows(freq, rows), clock), t.gather_rows(phase, rows)),
            activation,
        )

    wave = t.add(
        season(clocks.week_freq, clocks.week_phase, week_col),
        season(clocks.day_freq, clocks.day_phase, day_col),
    )
    n_temporal = clocks.week_freq.data.shape[1]
    d = amplitude.data.shape[1]
    if n_temporal == d:
        return t.mul(a, wave)
    temporal = t.mul(t.slice_cols(a, 0, n_temporal), wave)
    return t.concat_cols([temporal, t.slice_cols(a, n_temporal, d)])


class _AggregationPlan:
    """Packed-sequence schedule for one graph, reused across forward passes.

    Every structural event touches two replica nodes; the plan lists, per LSTM
    step, which message rows feed the still-active sequences (nodes ordered by
    decreasing sequence length, sequences ordered by event id).  Index arrays
    are built once so downstream scatter caches stay warm across epochs.
    """

    def __init__(self, graph: UnrolledGraph):
        self.n = graph.n_nodes
        event_ids = np.arange(graph.n_events, dtype=np.int64)
        self.inc_node = np.concatenate([graph.event_target_node, graph.event_linker_node])
        self.inc_event = np.concatenate([event_ids, event_ids])
        order = np.lexsort((self.inc_event, self.inc_node))
        nodes_sorted = self.inc_node[order]
        events_sorted = self.inc_event[order]
        uniq, starts, counts = np.unique(
            nodes_sorted, return_index=True, return_counts=True
        )
        by_len = np.argsort(-counts, kind="stable")
        uniq, starts, counts = uniq[by_len], starts[by_len], counts[by_len]
        # one representative incident event per touched node, for centering
        self.rep_nodes = uniq.copy()
        self.rep_events = events_sorted[starts].copy()
        # steps[i] = (message rows, kept prefix, finished rows, finished nodes)
        self.steps: list[tuple[np.ndarray, np.ndarray | None, np.ndarray | None, np.ndarray | None]] = []
        prev_k = len(uniq)
        max_len = int(counts[0]) if len(counts) else 0
        for step in range(max_len):
            k = int(np.searchsorted(-counts, -(step + 1), side="right"))
            done_rows = np.arange(k, prev_k) if k < prev_k else None
            done_nodes = uniq[k:prev_k].copy() if k < prev_k else None
            keep = np.arange(k) if k < prev_k else None
            self.steps.append((events_sorted[starts[:k] + step], keep, done_rows, done_nodes))
            prev_k = k
        self.final_nodes = uniq[:prev_k].copy()


class DiachronicParams:
    """Learnable tables: one row per entity, one per relation.

    When the configuration asks for LSTM aggregation the cell lives here too,
    so one object carries the module's whole trainable state.
    """

    def __init__(
        self,
        entities: list[EntityRef],
        relations: list[str],
        config: DiachronicConfig,
        rng: np.random.Generator,
    ):
        self.config = config
        self.entities = list(entities)
        self.relations = list(relations)
        self.entity_index = {e: i for i, e in enumerate(self.entities)}
        self.relation_index = {r: i for i, r in enumerate(self.relations)}
        d, n_temporal = config.d, config.n_temporal

        def table(rows: int) -> Tensor:
            return Tensor(rng.normal(0.0, 0.1, (rows, d)), requires_grad=True)

        self.amplitude = table(len(self.entities))
        self.relation_emb = table(len(self.relations))
        self.entity_clocks = (
            _ClockTable(len(self.entities), n_temporal, rng) if n_temporal else None
        )
        self.relation_clocks = (
            _ClockTable(len(self.relations), n_temporal, rng)
            if n_temporal and config.relation_time_dependent
            else None
        )
        lstm_width = 1 if config.scalar_scores else d
        self.lstm = (
            LSTMCell(lstm_width, d, rng) if config.aggregation == "lstm" else None
        )
        self._plan: tuple[int, _AggregationPlan] | None = None

    @classmethod
    def for_graph(
        cls, graph: UnrolledGraph, config: DiachronicConfig, rng: np.random.Generator
    ) -> "DiachronicParams":
        return cls(graph.entities, graph.relations, config, rng)

    def entity_rows(self, rows: np.ndarray, weeks: np.ndarray, days: np.ndarray) -> Tensor:
        return _embed_rows(
            self.amplitude, self.entity_clocks, rows, weeks, days, self.config.activation
        )

    def relation_rows(self, rows: np.ndarray, weeks: np.ndarray, days: np.ndarray) -> Tensor:
        return _embed_rows(
            self.relation_emb, self.relation_clocks, rows, weeks, days, self.config.activation
        )

    def plan_for(self, graph: UnrolledGraph) -> _AggregationPlan:
        key = id(graph)
        if self._plan is None or self._plan[0] != key:
            self._plan = (key, _AggregationPlan(graph))
        return self._plan[1]

    def named_parameters(self):
        yield "amplitude", self.amplitude
        yield "relation_emb", self.relation_emb
        if self.entity_clocks is not None:
            for name, p in self.entity_clocks.named_parameters():
                yield f"entity.{name}", p
        if self.relation_clocks is not None:
            for name, p in self.relation_clocks.named_parameters():
                yield f"relation.{name}", p
        if self.lstm is not None:
            for name, p in self.lstm.named_parameters():
                yield f"lstm.{name}", p


def deemb(v: EntityRef, week: int, day: int, params: DiachronicParams) -> Tensor:
    """Embedding of entity ``v`` at (week, day) as a 1 x d row tensor."""
    row = params.entity_index.get(v)
    if row is None:
        raise ValidationError(f"no embedding parameters for entity {v}")
    return params.entity_rows(
        np.array([row]), np.array([float(week)]), np.array([float(day)])
    )


def de_distmult(
    v: EntityRef,
    r: str,
    u: EntityRef,
    week: int,
    day: int,
    params: DiachronicParams,
    score_mode: str = "full_triple",
) -> tuple[float, Tensor]:
    """Trilinear edge score and its pre-summation message vector."""
    check_option("score_mode", score_mode, SCORE_MODES)
    rel = params.relation_index.get(r)
    if rel is None:
        raise ValidationError(f"no embedding parameters for relation {r!r}")
    z_v = deemb(v, week, day, params)
    z_r = params.relation_rows(
        np.array([rel]), np.array([float(week)]), np.array([float(day)])
    )
    message = t.mul(z_v, z_r)
    if score_mode == "full_triple":
        message = t.mul(message, deemb(u, week, day, params))
    return float(message.data.sum()), message


def edge_messages(
    graph: UnrolledGraph, params: DiachronicParams, config: DiachronicConfig
) -> Tensor:
    """One message row per structural event, in canonical event order.

    Hub nodes and temporal edges never appear here: only event edges carry
    relations and therefore scores.
    """
    rows_v = graph.replica_entity[graph.event_target_node]
    weeks = graph.event_week.astype(np.float64)
    days = graph.event_day.astype(np.float64)
    z_v = params.entity_rows(rows_v, weeks, days)
    z_r = params.relation_rows(graph.event_relation, weeks, days)
    message = t.mul(z_v, z_r)
    if config.score_mode == "full_triple":
        rows_u = graph.replica_entity[graph.event_linker_node]
        message = t.mul(message, params.entity_rows(rows_u, weeks, days))
    if config.scalar_scores:
        message = t.matmul(message, Tensor(np.ones((config.d, 1))))
    return message


def _mean_aggregate(messages: Tensor, plan: _AggregationPlan) -> Tensor:
    # centered mean: residuals against one representative message per node,
    # so a node whose messages all agree gets that message back exactly
    if plan.inc_event.size == 0:
        return Tensor(np.zeros((plan.n, messages.data.shape[1])))
    rep = t.scatter_aggregate(
        t.gather_rows(messages, plan.rep_events), plan.rep_nodes, plan.n, "sum"
    )
    per_endpoint = t.gather_rows(messages, plan.inc_event)
    residual = t.sub(per_endpoint, t.gather_rows(rep, plan.inc_node))
    return t.add(rep, t.scatter_aggregate(residual, plan.inc_node, plan.n, "mean"))


def _lstm_aggregate(messages: Tensor, plan: _AggregationPlan, cell: LSTMCell) -> Tensor:
    if not plan.steps:
        return Tensor(np.zeros((plan.n, cell.d_hidden)))
    n_seq = len(plan.steps[0][0])
    h = Tensor(np.zeros((n_seq, cell.d_hidden)))
    c = Tensor(np.zeros((n_seq, cell.d_hidden)))
    pieces = []
    for x_rows, keep, done_rows, done_nodes in plan.steps:
        if done_rows is not None:
            finished = t.gather_rows(h, done_rows)
            pieces.append(t.scatter_aggregate(finished, done_nodes, plan.n, "sum"))
            h = t.gather_rows(h, keep)
            c = t.gather_rows(c, keep)
        h, c = cell.step(t.gather_rows(messages, x_rows), h, c)
    pieces.append(t.scatter_aggregate(h, plan.final_nodes, plan.n, "sum"))
    out = pieces[0]
    for piece in pieces[1:]:
        out = t.add(out, piece)
    return out


def build_x_de(
    graph: UnrolledGraph,
    x: Tensor,
    params: DiachronicParams,
    config: DiachronicConfig | None = None,
) -> Tensor:
    """Concatenate per-node aggregated edge messages to the feature table.

    Nodes without incident structural edges (hubs included) receive zeros.
    """
    config = params.config if config is None else config
    if x.data.shape[0] != graph.n_nodes:
        raise ValidationError(
            f"feature table has {x.data.shape[0]} rows for {graph.n_nodes} nodes"
        )
    messages = edge_messages(graph, params, config)
    plan = params.plan_for(graph)
    if config.aggregation == "mean":
        agg = _mean_aggregate(messages, plan)
    else:
        if params.lstm is None:
            raise ConfigurationError(
                "params were built without an LSTM cell; use aggregation='mean' "
                "or rebuild with aggregation='lstm'"
            )
        agg = _lstm_aggregate(messages, plan, params.lstm)
    return t.concat_cols([x, agg])


def write_embedding_csv(path, graph: UnrolledGraph, params: DiachronicParams) -> int:
    """Write one row per labeled target: type, id, embedding at its first
    event time, binary label.  Returns the number of rows written."""
    weeks, days = graph.target_creation_times()
    d = params.config.d
    header = ["target_type", "target_id"] + [f"e{i}" for i in range(d)] + ["label"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for pos, ent in enumerate(graph.target_entities):
            z = deemb(ent, int(weeks[pos]), int(days[pos]), params).data[0]
            writer.writerow(
                [ent.node_type, ent.entity_id]
                + [repr(float(v)) for v in z]
                + [int(graph.binary_labels[pos])]
            )
    return len(graph.target_entities)
