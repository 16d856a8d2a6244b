"""Linker-reuse features, the linear baseline, and permutation importance."""

import numpy as np
import pytest
from scipy.special import expit

from dyhgraph.data import generate, preset_config
from dyhgraph.errors import ConfigurationError, ValidationError
from dyhgraph.features import (
    FEATURE_HEADER,
    FEATURE_NAMES,
    FeatureImportance,
    FeatureRow,
    LinearModel,
    extract_features,
    feature_matrix,
    fit_linear,
    permutation_importance,
    read_feature_rows_csv,
    write_feature_rows_csv,
    write_importance_csv,
)
from dyhgraph.graph import EntityRef, EventRecord


def ev(target, linker, week, day):
    return EventRecord(target, linker, linker.node_type, week, day)


ACCT = EntityRef("account", 0)


class TestFeatureRow:
    def test_field_order_matches_header(self):
        row = FeatureRow(63, 9, 4, 2, 9, 0, 2, 2, 2, 0)
        assert row.as_tuple() == (63, 9, 4, 2, 9, 0, 2, 2, 2, 0)
        assert FEATURE_HEADER[1:-1] == ["day", "week", *FEATURE_NAMES]

    def test_negative_count_rejected(self):
        with pytest.raises(ValidationError):
            FeatureRow(1, 1, -1, 0, 0, 0, 0, 0, 0, 0)

    def test_snapshots_cannot_exceed_relations(self):
        with pytest.raises(ValidationError):
            FeatureRow(1, 1, 1, 0, 0, 0, 2, 0, 0, 0)


class TestExtract:
    def test_reuse_counts_of_attached_linkers(self):
        """Account created on day 63 of week 9, with an address used 4 times
        over 2 weeks, a phone used 9 times over 2 weeks, an ip used twice in
        2 weeks, and no email."""
        address = EntityRef("address", 1)
        phone = EntityRef("phone", 2)
        ip = EntityRef("ip", 3)
        other = [EntityRef("account", k) for k in range(1, 10)]
        events = [
            ev(ACCT, address, 9, 63),
            ev(ACCT, phone, 9, 63),
            ev(ACCT, ip, 9, 63),
            # address: 3 further uses, weeks {5, 9}
            ev(other[0], address, 5, 29),
            ev(other[1], address, 5, 30),
            ev(other[2], address, 9, 58),
            # phone: 8 further uses, weeks {3, 9}
            ev(other[0], phone, 3, 15),
            ev(other[1], phone, 3, 16),
            ev(other[2], phone, 3, 17),
            ev(other[3], phone, 3, 18),
            ev(other[4], phone, 3, 19),
            ev(other[5], phone, 9, 57),
            ev(other[6], phone, 9, 58),
            ev(other[7], phone, 9, 59),
            # ip: 1 further use, week 2
            ev(other[8], ip, 2, 8),
        ]
        (row,) = extract_features(events, [ACCT], "global")
        assert row.as_tuple() == (63, 9, 4, 2, 9, 0, 2, 2, 2, 0)

    def test_single_use_linkers(self):
        events = [
            ev(ACCT, EntityRef("ip", 1), 2, 9),
            ev(ACCT, EntityRef("email", 1), 2, 9),
        ]
        (row,) = extract_features(events, [ACCT], "global")
        for t in ("address", "phone"):
            assert getattr(row, f"relations_{t}") == 0
        for t in ("ip", "email"):
            assert getattr(row, f"relations_{t}") == 1
            assert getattr(row, f"snapshots_{t}") == 1

    def test_absent_target_rejected(self):
        events = [ev(EntityRef("account", 1), EntityRef("ip", 1), 1, 1)]
        with pytest.raises(ValidationError):
            extract_features(events, [ACCT], "global")

    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigurationError):
            extract_features([], [], "windowed")

    def test_multiple_linkers_keep_the_busiest(self):
        hot, cold = EntityRef("ip", 1), EntityRef("ip", 2)
        events = [ev(ACCT, hot, 1, 1), ev(ACCT, cold, 1, 1)]
        events += [ev(EntityRef("account", k), hot, k, 7 * k) for k in range(2, 6)]
        with pytest.warns(UserWarning, match="busiest"):
            (row,) = extract_features(events, [ACCT], "global")
        assert row.relations_ip == 5
        assert row.snapshots_ip == 5

    def test_incremental_window_stops_at_creation_week(self):
        ip = EntityRef("ip", 1)
        events = [
            ev(EntityRef("account", 1), ip, 1, 3),
            ev(ACCT, ip, 2, 10),
            ev(EntityRef("account", 2), ip, 3, 15),
            ev(EntityRef("account", 3), ip, 3, 16),
        ]
        (row_g,) = extract_features(events, [ACCT], "global")
        (row_i,) = extract_features(events, [ACCT], "incremental")
        assert (row_g.relations_ip, row_g.snapshots_ip) == (4, 3)
        assert (row_i.relations_ip, row_i.snapshots_ip) == (2, 2)

    def test_incremental_ignores_linkers_attached_after_creation(self):
        early, late = EntityRef("address", 1), EntityRef("address", 2)
        events = [ev(ACCT, early, 2, 10), ev(ACCT, late, 5, 31)]
        events += [ev(EntityRef("account", k), late, 6, 38 + k) for k in range(1, 7)]
        with pytest.warns(UserWarning):
            (row_g,) = extract_features(events, [ACCT], "global")
        (row_i,) = extract_features(events, [ACCT], "incremental")
        assert row_g.relations_address == 7
        assert row_i.relations_address == 1

    @staticmethod
    def _random_log(rng, n_targets=12):
        events = []
        for i in range(n_targets):
            target = EntityRef("account", i)
            first_week = int(rng.integers(1, 6))
            for _ in range(int(rng.integers(1, 5))):
                week = int(rng.integers(first_week, 7))
                day = 7 * (week - 1) + int(rng.integers(1, 8))
                t = str(rng.choice(["address", "ip", "phone", "email"]))
                linker = EntityRef(t, int(rng.integers(0, 5)))
                events.append(ev(target, linker, week, day))
        return events

    @staticmethod
    def _recount(events, target, mode):
        """Brute-force oracle: rescan the log per candidate linker."""
        mine = [e for e in events if e.target == target]
        week = min((e.week, e.day) for e in mine)[0]
        window = [e for e in events if mode == "global" or e.week <= week]
        out = []
        for t in ("address", "ip", "phone", "email"):
            candidates = {
                e.linker
                for e in window
                if e.target == target and e.linker.node_type == t
            }
            best = (0, 0)
            for linker in sorted(candidates, key=lambda l: l.entity_id):
                uses = [e.week for e in window if e.linker == linker]
                if len(uses) > best[0]:
                    best = (len(uses), len(set(uses)))
            out.extend(best)
        # header order groups relations together, then snapshots
        return tuple(out[0::2]) + tuple(out[1::2])

    @pytest.mark.filterwarnings("ignore:.*several linkers")
    def test_counts_match_brute_force_recount(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            events = self._random_log(rng)
            targets = sorted({e.target for e in events})
            for mode in ("global", "incremental"):
                rows = extract_features(events, targets, mode)
                for target, row in zip(targets, rows):
                    assert row.counts() == self._recount(events, target, mode)

    @pytest.mark.filterwarnings("ignore:.*several linkers")
    def test_incremental_never_exceeds_global(self):
        rng = np.random.default_rng(6)
        events = self._random_log(rng, n_targets=20)
        targets = sorted({e.target for e in events})
        global_rows = extract_features(events, targets, "global")
        incr_rows = extract_features(events, targets, "incremental")
        for g, i in zip(global_rows, incr_rows):
            assert all(a >= b for a, b in zip(g.counts(), i.counts()))

    @pytest.mark.filterwarnings("ignore:.*several linkers")
    def test_record_order_invariance(self):
        rng = np.random.default_rng(7)
        events = self._random_log(rng)
        targets = sorted({e.target for e in events})
        rows = extract_features(events, targets, "incremental")
        shuffled = [events[k] for k in rng.permutation(len(events))]
        assert extract_features(shuffled, targets, "incremental") == rows


class TestFitLinear:
    def test_separable_points_classified_perfectly(self):
        x = np.array([[0.0], [1.0], [0.0], [1.0]])
        y = np.array([0, 1, 0, 1])
        model = fit_linear(x, y, l2=0.0, lr=1.0, epochs=300)
        assert np.array_equal(model.predict(x), y)

    def test_first_step_matches_closed_form_gradient(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(40, 5))
        y = rng.integers(0, 2, size=40)
        lr, l2 = 0.5, 0.3
        model = fit_linear(x, y, l2=l2, lr=lr, epochs=1)
        xs = (x - x.mean(0)) / x.std(0)
        residual = (0.5 - y) / 40.0
        assert np.allclose(model.weights, -lr * (xs.T @ residual), atol=1e-10)
        assert abs(model.bias - (-lr * residual.sum())) < 1e-10

    def test_heavy_regularization_collapses_to_prevalence(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(40, 3))
        y = (rng.random(40) < 0.25).astype(int)
        model = fit_linear(x, y, l2=1e3, lr=1e-3, epochs=20000)
        assert np.all(np.abs(model.weights) < 1e-3)
        proba = model.predict_proba(x)
        assert proba.std() < 1e-2
        assert abs(proba.mean() - y.mean()) < 0.05

    def test_zero_variance_feature_dropped(self):
        x = np.column_stack([np.arange(10.0), np.full(10, 3.0)])
        y = (np.arange(10) > 4).astype(int)
        with pytest.warns(UserWarning, match="zero-variance"):
            model = fit_linear(x, y, epochs=50)
        assert model.weights[1] == 0.0
        assert np.isfinite(model.decision_function(x)).all()

    def test_planted_ip_reuse_gets_positive_weight(self):
        config = preset_config("uneven", n_targets=400, T=6, seed=3)
        events, labels, _ = generate(config)
        targets = sorted(labels.binary)
        rows = extract_features(events, targets, "global")
        y = np.array([labels.binary[t] for t in targets])
        model = fit_linear(rows, y, l2=1e-3, lr=0.5, epochs=400)
        assert model.weights[FEATURE_NAMES.index("relations_ip")] > 0

    def test_bad_arguments_rejected(self):
        x = np.zeros((4, 2))
        with pytest.raises(ValidationError):
            fit_linear(x, [0, 1], epochs=5)
        with pytest.raises(ValidationError):
            fit_linear(x, [0, 1, 0, 1], lr=0.0, epochs=5)
        with pytest.raises(ValidationError):
            fit_linear(x, [0, 1, 0, 1], feature_names=("a",), epochs=5)
        with pytest.raises(ValidationError):
            fit_linear(np.zeros((0, 2)), [], epochs=5)


def manual_model(names, weights):
    d = len(names)
    return LinearModel(
        tuple(names), np.asarray(weights, dtype=np.float64), 0.0, 0.0,
        np.zeros(d), np.ones(d),
    )


class TestImportance:
    def test_zero_weight_feature_has_zero_importance(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(200, 2))
        y = (x[:, 0] > 0).astype(int)
        model = manual_model(("signal", "ignored"), [1.0, 0.0])
        report = permutation_importance(model, x, y, repeats=10, seed=0)
        by_name = {r.feature: r for r in report}
        assert abs(by_name["ignored"].mean_ap_drop) < 1e-12
        assert by_name["signal"].mean_ap_drop > 0.1

    def test_duplicated_pair_shares_importance(self):
        rng = np.random.default_rng(3)
        s1 = rng.normal(size=300)
        s2 = rng.normal(size=300)
        x = np.column_stack([s1, s1, s2])
        y = (s1 + s2 + 0.3 * rng.normal(size=300) > 0).astype(int)
        model = manual_model(("dup_a", "dup_b", "unique"), [0.5, 0.5, 1.0])
        report = {r.feature: r.mean_ap_drop for r in
                  permutation_importance(model, x, y, repeats=10, seed=1)}
        assert report["dup_a"] < report["unique"]
        assert report["dup_b"] < report["unique"]

    def test_column_order_invariance(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(200, 4))
        y = (x @ np.array([1.0, -0.5, 0.25, 0.0]) > 0).astype(int)
        names = ("a", "b", "c", "d")
        perm = [2, 0, 3, 1]
        model = fit_linear(x, y, feature_names=names, epochs=200)
        permuted = fit_linear(
            x[:, perm], y, feature_names=[names[j] for j in perm], epochs=200
        )
        base = {r.feature: r.mean_ap_drop for r in
                permutation_importance(model, x, y, seed=5)}
        other = {r.feature: r.mean_ap_drop for r in
                 permutation_importance(permuted, x[:, perm], y, seed=5)}
        for name in names:
            assert other[name] == pytest.approx(base[name], abs=1e-12)


class TestFeatureCsv:
    def _sample(self):
        targets = [EntityRef("account", k) for k in range(3)]
        rows = [
            FeatureRow(63, 9, 4, 2, 9, 0, 2, 2, 2, 0),
            FeatureRow(1, 1, 0, 0, 0, 0, 0, 0, 0, 0),
            FeatureRow(14, 2, 3, 3, 0, 1, 2, 1, 0, 1),
        ]
        return targets, rows, np.array([1, 0, 1])

    def test_roundtrip(self, tmp_path):
        targets, rows, labels = self._sample()
        path = tmp_path / "rows.csv"
        write_feature_rows_csv(path, targets, rows, labels)
        ids, back, y = read_feature_rows_csv(path)
        assert ids == [t.entity_id for t in targets]
        assert back == rows
        assert np.array_equal(y, labels)

    def test_write_is_deterministic(self, tmp_path):
        targets, rows, labels = self._sample()
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_feature_rows_csv(a, targets, rows, labels)
        write_feature_rows_csv(b, targets, rows, labels)
        assert a.read_bytes() == b.read_bytes()

    def test_header_mismatch_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("nope\n1\n")
        with pytest.raises(ValidationError):
            read_feature_rows_csv(path)

    def test_length_mismatch_rejected(self, tmp_path):
        targets, rows, labels = self._sample()
        with pytest.raises(ValidationError):
            write_feature_rows_csv(tmp_path / "x.csv", targets[:2], rows, labels)

    def test_matrix_shape(self):
        _, rows, _ = self._sample()
        assert feature_matrix(rows).shape == (3, len(FEATURE_NAMES))

    def test_importance_csv_layout(self, tmp_path):
        path = tmp_path / "imp.csv"
        write_importance_csv(path, [FeatureImportance("relations_ip", 0.25, 0.01)])
        text = path.read_text()
        assert text == "feature,mean_ap_drop,std\nrelations_ip,0.25,0.01\n"
