"""Diachronic embeddings, edge scoring, and per-node aggregation."""

from __future__ import annotations

import csv

import numpy as np
import pytest

from dyhgraph.diachronic import (
    DiachronicConfig,
    DiachronicParams,
    build_x_de,
    de_distmult,
    deemb,
    edge_messages,
    write_embedding_csv,
)
from dyhgraph.errors import ConfigurationError, ValidationError
from dyhgraph.graph import EntityRef, EventRecord, LabelSet, build_unrolled_graph
from dyhgraph.layers import lstm_forward
from dyhgraph.tensor import Tensor, tsum

from helpers import check_gradients


def acct(i: int) -> EntityRef:
    return EntityRef("account", i)


def ip(i: int) -> EntityRef:
    return EntityRef("ip", i)


def ev(target: EntityRef, linker: EntityRef, relation: str, day: int) -> EventRecord:
    return EventRecord(target, linker, relation, (day + 6) // 7, day)


def labels_for(events) -> LabelSet:
    return LabelSet(binary={e.target: 0 for e in events})


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def toy_params(config: DiachronicConfig, rng, n_entities: int = 3) -> DiachronicParams:
    entities = [acct(i) for i in range(n_entities)]
    return DiachronicParams(entities, ["ip", "phone"], config, rng)


class TestDeemb:
    def test_gamma_zero_is_static(self, rng):
        params = toy_params(DiachronicConfig(d=4, gamma=0.0), rng)
        expected = params.amplitude.data[1]
        for week, day in [(1, 3), (9, 60), (2, 14), (5, 29)]:
            z = deemb(acct(1), week, day, params)
            assert z.data.shape == (1, 4)
            np.testing.assert_array_equal(z.data[0], expected)

    def test_hand_evaluated_temporal_component(self, rng):
        # a=[2], week frequency 1 and phase 0, day clock silenced:
        # 2 * (sin(week) + sin(0)) evaluated at week = pi/2 gives exactly 2
        params = toy_params(DiachronicConfig(d=1, gamma=1.0), rng, n_entities=1)
        params.amplitude.data[:] = 2.0
        params.entity_clocks.week_freq.data[:] = 1.0
        params.entity_clocks.week_phase.data[:] = 0.0
        params.entity_clocks.day_freq.data[:] = 0.0
        params.entity_clocks.day_phase.data[:] = 0.0
        z = deemb(acct(0), np.pi / 2, 17, params)
        assert z.data[0, 0] == pytest.approx(2.0, abs=1e-12)

    def test_static_tail_invariant_across_times(self, rng):
        d, gamma = 5, 0.5
        params = toy_params(DiachronicConfig(d=d, gamma=gamma), rng)
        n_temporal = int(gamma * d)
        assert n_temporal == 2
        tails = []
        for _ in range(10):
            week = int(rng.integers(1, 20))
            day = int(rng.integers(7 * (week - 1) + 1, 7 * week + 1))
            tails.append(deemb(acct(2), week, day, params).data[0, n_temporal:])
        for tail in tails[1:]:
            np.testing.assert_array_equal(tail, tails[0])

    def test_temporal_head_varies_with_time(self, rng):
        params = toy_params(DiachronicConfig(d=4, gamma=1.0), rng)
        a = deemb(acct(0), 1, 3, params).data
        b = deemb(acct(0), 9, 60, params).data
        assert np.abs(a - b).max() > 1e-8

    def test_unknown_entity_rejected(self, rng):
        params = toy_params(DiachronicConfig(d=4), rng)
        with pytest.raises(ValidationError, match="no embedding parameters"):
            deemb(EntityRef("email", 99), 1, 1, params)


class TestDeDistMult:
    def test_hand_trilinear_product(self, rng):
        params = toy_params(DiachronicConfig(d=2, gamma=0.0), rng)
        params.amplitude.data[0] = [1.0, 2.0]
        params.amplitude.data[1] = [3.0, 1.0]
        params.relation_emb.data[0] = [1.0, 1.0]
        score, message = de_distmult(acct(0), "ip", acct(1), 1, 1, params)
        np.testing.assert_allclose(message.data[0], [3.0, 2.0], atol=1e-15)
        assert score == pytest.approx(5.0, abs=1e-12)

    def test_zero_embedding_zeroes_score(self, rng):
        params = toy_params(DiachronicConfig(d=3, gamma=0.0), rng)
        params.amplitude.data[1] = 0.0
        score, _ = de_distmult(acct(0), "ip", acct(1), 1, 1, params)
        assert score == pytest.approx(0.0, abs=1e-15)

    def test_symmetric_in_entity_arguments(self, rng):
        params = toy_params(DiachronicConfig(d=6, gamma=0.5), rng)
        s_vu, m_vu = de_distmult(acct(0), "phone", acct(2), 3, 18, params)
        s_uv, m_uv = de_distmult(acct(2), "phone", acct(0), 3, 18, params)
        assert abs(s_vu - s_uv) < 1e-12
        np.testing.assert_allclose(m_vu.data, m_uv.data, atol=1e-12)

    def test_linear_in_relation_embedding(self, rng):
        params = toy_params(DiachronicConfig(d=4, gamma=0.0), rng)
        s1, _ = de_distmult(acct(0), "ip", acct(1), 2, 9, params)
        params.relation_emb.data[0] *= 2.0
        s2, _ = de_distmult(acct(0), "ip", acct(1), 2, 9, params)
        assert abs(s2 - 2.0 * s1) < 1e-12

    def test_source_only_ignores_destination(self, rng):
        params = toy_params(DiachronicConfig(d=4, gamma=0.0), rng)
        _, before = de_distmult(
            acct(0), "ip", acct(1), 1, 1, params, score_mode="source_relation_only"
        )
        params.amplitude.data[1] += 10.0
        _, after = de_distmult(
            acct(0), "ip", acct(1), 1, 1, params, score_mode="source_relation_only"
        )
        np.testing.assert_array_equal(before.data, after.data)

    def test_unknown_relation_rejected(self, rng):
        params = toy_params(DiachronicConfig(d=4), rng)
        with pytest.raises(ValidationError, match="no embedding parameters"):
            de_distmult(acct(0), "email", acct(1), 1, 1, params)


class TestConfig:
    def test_bad_aggregation_rejected(self):
        with pytest.raises(ConfigurationError):
            DiachronicConfig(aggregation="gru")

    def test_bad_gamma_rejected(self):
        with pytest.raises(ConfigurationError):
            DiachronicConfig(gamma=1.5)

    def test_bad_score_mode_rejected(self):
        with pytest.raises(ConfigurationError):
            DiachronicConfig(score_mode="triple")


def two_event_graph(first_linker: EntityRef, second_linker: EntityRef):
    """Account 0 linked to two ips on consecutive days of week 1."""
    events = [
        ev(acct(0), first_linker, "ip", day=1),
        ev(acct(0), second_linker, "ip", day=2),
    ]
    return build_unrolled_graph(events, labels_for(events), T=1)


class TestBuildXDe:
    def test_mean_single_edge_copies_message(self, rng):
        events = [ev(acct(0), ip(1), "ip", day=3)]
        graph = build_unrolled_graph(events, labels_for(events), T=1)
        config = DiachronicConfig(d=3, gamma=0.5, aggregation="mean")
        params = DiachronicParams.for_graph(graph, config, rng)
        x = Tensor(np.zeros((graph.n_nodes, 2)))
        x_de = build_x_de(graph, x, params, config)
        assert x_de.data.shape == (graph.n_nodes, 2 + 3)
        message = edge_messages(graph, params, config).data[0]
        block = x_de.data[:, 2:]
        # both endpoint replicas carry the lone message; hubs stay zero
        np.testing.assert_allclose(block[0], message, atol=1e-14)
        np.testing.assert_allclose(block[1], message, atol=1e-14)
        np.testing.assert_array_equal(block[graph.hub_offset :], 0.0)

    def test_mean_of_identical_messages_is_exact(self, rng):
        # the same link observed on three days of one week; with gamma=0 the
        # three messages are identical, so their mean must equal any one of them
        events = [ev(acct(0), ip(1), "ip", day=d) for d in (1, 2, 3)]
        graph = build_unrolled_graph(events, labels_for(events), T=1)
        config = DiachronicConfig(d=4, gamma=0.0, aggregation="mean")
        params = DiachronicParams.for_graph(graph, config, rng)
        x = Tensor(np.zeros((graph.n_nodes, 1)))
        block = build_x_de(graph, x, params, config).data[:, 1:]
        message = edge_messages(graph, params, config).data[0]
        np.testing.assert_array_equal(block[0], message)

    def test_mean_permutation_invariant_lstm_not(self, rng):
        # same multiset of messages per node, opposite order: with gamma=0 the
        # messages carry no time, so only the feeding order distinguishes runs
        graph_a = two_event_graph(ip(1), ip(2))
        graph_b = two_event_graph(ip(2), ip(1))
        assert graph_a.n_nodes == graph_b.n_nodes
        x = Tensor(np.zeros((graph_a.n_nodes, 1)))
        for aggregation, should_match in (("mean", True), ("lstm", False)):
            config = DiachronicConfig(d=5, gamma=0.0, aggregation=aggregation)
            params = DiachronicParams.for_graph(graph_a, config, np.random.default_rng(3))
            out_a = build_x_de(graph_a, x, params, config).data
            out_b = build_x_de(graph_b, x, params, config).data
            target_row = 0  # account replica: sequence [m1, m2] vs [m2, m1]
            gap = np.abs(out_a[target_row] - out_b[target_row]).max()
            if should_match:
                assert gap < 1e-12
            else:
                assert gap > 1e-8

    def test_gamma_zero_module_time_invariant(self, rng):
        events = [
            ev(acct(0), ip(1), "ip", day=2),
            ev(acct(0), ip(2), "ip", day=10),
            ev(acct(1), ip(2), "ip", day=11),
        ]
        shifted = [
            EventRecord(e.target, e.linker, e.relation, e.week + 3, e.day + 21)
            for e in events
        ]
        graph_a = build_unrolled_graph(events, labels_for(events), T=2)
        graph_b = build_unrolled_graph(shifted, labels_for(events), T=5)
        config = DiachronicConfig(d=4, gamma=0.0, aggregation="lstm")
        params = DiachronicParams.for_graph(graph_a, config, np.random.default_rng(11))
        x = Tensor(np.zeros((graph_a.n_nodes, 1)))
        out_a = build_x_de(graph_a, x, params, config).data
        out_b = build_x_de(graph_b, x, params, config).data
        np.testing.assert_array_equal(out_a, out_b)

    def test_lstm_matches_per_node_sequential_oracle(self, rng):
        # random log; the packed batching must agree with running each node's
        # message sequence through the cell one row at a time
        events = []
        for _ in range(30):
            week = int(rng.integers(1, 4))
            day = int(rng.integers(7 * (week - 1) + 1, 7 * week + 1))
            events.append(
                EventRecord(acct(int(rng.integers(4))), ip(int(rng.integers(3))), "ip", week, day)
            )
        graph = build_unrolled_graph(events, labels_for(events), T=3)
        config = DiachronicConfig(d=3, gamma=0.5, aggregation="lstm")
        params = DiachronicParams.for_graph(graph, config, rng)
        x = Tensor(np.zeros((graph.n_nodes, 2)))
        block = build_x_de(graph, x, params, config).data[:, 2:]

        messages = edge_messages(graph, params, config).data
        for node in range(graph.n_nodes):
            rows = [
                messages[k]
                for k in range(graph.n_events)
                if graph.event_target_node[k] == node or graph.event_linker_node[k] == node
            ]
            if not rows:
                np.testing.assert_array_equal(block[node], 0.0)
                continue
            steps = [Tensor(r.reshape(1, -1)) for r in rows]
            expected = lstm_forward(params.lstm, steps).data[0]
            np.testing.assert_allclose(block[node], expected, atol=1e-10)

    def test_scalar_scores_shrink_message_width(self, rng):
        events = [ev(acct(0), ip(1), "ip", day=1), ev(acct(0), ip(2), "ip", day=2)]
        graph = build_unrolled_graph(events, labels_for(events), T=1)
        config = DiachronicConfig(d=4, gamma=0.0, aggregation="mean", scalar_scores=True)
        params = DiachronicParams.for_graph(graph, config, rng)
        x = Tensor(np.zeros((graph.n_nodes, 2)))
        x_de = build_x_de(graph, x, params, config)
        assert x_de.data.shape == (graph.n_nodes, 2 + 1)
        scores = edge_messages(graph, params, config).data
        assert scores.shape == (2, 1)
        assert x_de.data[0, 2] == pytest.approx(scores.mean(), abs=1e-12)

    def test_scalar_scores_with_lstm_keeps_width_d(self, rng):
        events = [ev(acct(0), ip(1), "ip", day=1)]
        graph = build_unrolled_graph(events, labels_for(events), T=1)
        config = DiachronicConfig(d=4, gamma=0.0, aggregation="lstm", scalar_scores=True)
        params = DiachronicParams.for_graph(graph, config, rng)
        x = Tensor(np.zeros((graph.n_nodes, 2)))
        assert build_x_de(graph, x, params, config).data.shape == (graph.n_nodes, 2 + 4)

    def test_relation_clock_varies_when_enabled(self, rng):
        config = DiachronicConfig(d=4, gamma=0.5, relation_time_dependent=True)
        params = toy_params(config, rng)
        early = params.relation_rows(np.array([0]), np.array([1.0]), np.array([2.0]))
        late = params.relation_rows(np.array([0]), np.array([9.0]), np.array([60.0]))
        assert np.abs(early.data - late.data).max() > 1e-8

    def test_row_count_mismatch_rejected(self, rng):
        events = [ev(acct(0), ip(1), "ip", day=1)]
        graph = build_unrolled_graph(events, labels_for(events), T=1)
        params = DiachronicParams.for_graph(graph, DiachronicConfig(d=2), rng)
        with pytest.raises(ValidationError, match="rows"):
            build_x_de(graph, Tensor(np.zeros((1, 2))), params)


class TestGradients:
    def test_gradients_flow_through_all_tables(self, rng):
        events = [
            ev(acct(0), ip(1), "ip", day=1),
            ev(acct(0), ip(2), "ip", day=2),
            ev(acct(1), ip(2), "ip", day=3),
        ]
        graph = build_unrolled_graph(events, labels_for(events), T=1)
        config = DiachronicConfig(d=3, gamma=0.5, aggregation="lstm")
        params = DiachronicParams.for_graph(graph, config, rng)
        x = Tensor(np.zeros((graph.n_nodes, 1)))
        weights = Tensor(rng.standard_normal((graph.n_nodes, 4)))

        def loss():
            return tsum(build_x_de(graph, x, params, config) * weights)

        tables = [p for _, p in params.named_parameters()]
        check_gradients(loss, tables, rng, n_points=20)

    def test_gradients_flow_in_mean_mode(self, rng):
        events = [ev(acct(0), ip(1), "ip", day=1), ev(acct(1), ip(1), "ip", day=4)]
        graph = build_unrolled_graph(events, labels_for(events), T=1)
        config = DiachronicConfig(
            d=3, gamma=0.5, aggregation="mean", relation_time_dependent=True
        )
        params = DiachronicParams.for_graph(graph, config, rng)
        x = Tensor(np.zeros((graph.n_nodes, 1)))
        weights = Tensor(rng.standard_normal((graph.n_nodes, 4)))

        def loss():
            return tsum(build_x_de(graph, x, params, config) * weights)

        tables = [p for _, p in params.named_parameters()]
        check_gradients(loss, tables, rng, n_points=20)


class TestExport:
    def test_csv_layout(self, rng, tmp_path):
        events = [
            ev(acct(0), ip(1), "ip", day=2),
            ev(acct(1), ip(1), "ip", day=9),
        ]
        labels = LabelSet(binary={acct(0): 1, acct(1): 0})
        graph = build_unrolled_graph(events, labels, T=2)
        params = DiachronicParams.for_graph(graph, DiachronicConfig(d=3), rng)
        path = tmp_path / "emb.csv"
        n = write_embedding_csv(path, graph, params)
        assert n == 2
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["target_type", "target_id", "e0", "e1", "e2", "label"]
        assert len(rows) == 3
        assert [r[-1] for r in rows[1:]] == ["1", "0"]
        expected = deemb(acct(0), 1, 2, params).data[0]
        got = np.array([float(v) for v in rows[1][2:5]])
        np.testing.assert_allclose(got, expected, atol=1e-15)
