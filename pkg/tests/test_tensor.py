"""Tensor engine: forward contracts, taped gradients, optimizer behavior."""

import math

import numpy as np
import pytest

from helpers import check_gradients, matmul_oracle

import dyhgraph.tensor as t
from dyhgraph.errors import ConfigurationError, ContractError, DimensionError
from dyhgraph.tensor import AdamW, SparseMatrix, Tape, Tensor, backward


@pytest.fixture
def rng():
    return np.random.default_rng(20240801)


class TestForward:
    def test_matmul_matches_triple_loop_oracle(self, rng):
        for _ in range(5):
            a = rng.standard_normal((4, 3))
            b = rng.standard_normal((3, 5))
            got = t.matmul(Tensor(a), Tensor(b)).data
            np.testing.assert_allclose(got, matmul_oracle(a, b), rtol=1e-12)

    def test_matmul_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            t.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_softmax_rows_example(self):
        out = t.softmax_rows(Tensor([[math.log(2.0), 0.0]])).data
        np.testing.assert_allclose(out, [[2 / 3, 1 / 3]], atol=1e-12)

    def test_softmax_rows_sum_to_one_and_shift_invariant(self, rng):
        x = rng.standard_normal((6, 5)) * 3
        y = t.softmax_rows(Tensor(x)).data
        np.testing.assert_allclose(y.sum(axis=1), np.ones(6), atol=1e-12)
        y_shift = t.softmax_rows(Tensor(x + 123.0)).data
        np.testing.assert_allclose(y, y_shift, atol=1e-12)

    def test_softmax_rows_extreme_logits_stay_finite(self):
        y = t.softmax_rows(Tensor([[1e4, 0.0, -1e4]])).data
        assert np.all(np.isfinite(y))
        np.testing.assert_allclose(y.sum(), 1.0, atol=1e-12)

    def test_layer_norm_standardizes_row(self):
        gain = Tensor(np.ones(2))
        bias = Tensor(np.zeros(2))
        out = t.layer_norm(Tensor([[0.0, 2.0]]), gain, bias).data
        # oracle: (x - 1) / sqrt(1 + 1e-5), frozen by hand
        expected = 1.0 / math.sqrt(1.0 + 1e-5)
        np.testing.assert_allclose(out, [[-expected, expected]], atol=1e-12)
        np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-5)

    def test_layer_norm_row_statistics(self, rng):
        x = rng.standard_normal((7, 9)) * 4 + 2
        out = t.layer_norm(Tensor(x), Tensor(np.ones(9)), Tensor(np.zeros(9))).data
        np.testing.assert_allclose(out.mean(axis=1), np.zeros(7), atol=1e-12)
        np.testing.assert_allclose(out.std(axis=1), np.ones(7), atol=1e-4)

    def test_unary_registry(self, rng):
        x = rng.standard_normal((3, 4))
        np.testing.assert_allclose(t.relu(Tensor(x)).data, np.maximum(x, 0))
        np.testing.assert_allclose(t.sine(Tensor(x)).data, np.sin(x))
        np.testing.assert_allclose(t.tanh(Tensor(x)).data, np.tanh(x))
        np.testing.assert_allclose(t.sigmoid(Tensor(x)).data, 1 / (1 + np.exp(-x)))
        np.testing.assert_allclose(t.identity(Tensor(x)).data, x)

    def test_unknown_unary_rejected(self):
        with pytest.raises(ConfigurationError, match="unknown unary"):
            t.elementwise_unary(Tensor([1.0]), "cosine")

    def test_scatter_sum_basic(self):
        msgs = Tensor([[1.0, 2.0], [3.0, 4.0], [10.0, 20.0]])
        out = t.scatter_aggregate(msgs, [1, 1, 0], n=3, mode="sum").data
        np.testing.assert_allclose(out, [[10.0, 20.0], [4.0, 6.0], [0.0, 0.0]])

    def test_scatter_mean_example(self):
        out = t.scatter_aggregate(Tensor([[2.0], [4.0]]), [0, 0], n=1, mode="mean").data
        np.testing.assert_allclose(out, [[3.0]])

    def test_scatter_empty_target_rows_are_zero(self, rng):
        msgs = Tensor(rng.standard_normal((5, 3)))
        out = t.scatter_aggregate(msgs, [0, 0, 2, 2, 2], n=4, mode="mean").data
        np.testing.assert_allclose(out[1], np.zeros(3))
        np.testing.assert_allclose(out[3], np.zeros(3))

    def test_scatter_mass_conservation(self, rng):
        msgs = rng.standard_normal((40, 6))
        idx = rng.integers(0, 9, 40)
        out = t.scatter_aggregate(Tensor(msgs), idx, n=9, mode="sum").data
        np.testing.assert_allclose(out.sum(axis=0), msgs.sum(axis=0), atol=1e-10)

    def test_scatter_index_out_of_range(self):
        with pytest.raises(IndexError):
            t.scatter_aggregate(Tensor([[1.0]]), [5], n=2, mode="sum")

    def test_gather_rows_out_of_range(self):
        with pytest.raises(IndexError):
            t.gather_rows(Tensor(np.zeros((3, 2))), [3])

    def test_dropout_eval_is_bit_identical(self, rng):
        x = Tensor(rng.standard_normal((10, 10)))
        out = t.dropout(x, 0.5, training=False, rng=rng)
        assert out is x

    def test_dropout_training_survivor_fraction_and_scaling(self):
        x = Tensor(np.ones((100, 100)))
        out = t.dropout(x, 0.5, training=True, rng=np.random.default_rng(7)).data
        survivors = np.count_nonzero(out) / out.size
        assert 0.47 <= survivors <= 0.53
        np.testing.assert_allclose(out[out != 0], 2.0)

    def test_dropout_rejects_p_of_one(self):
        with pytest.raises(ConfigurationError):
            t.dropout(Tensor([1.0]), 1.0, training=True, rng=0)

    def test_spmm_matches_dense(self, rng):
        import scipy.sparse as sp

        dense = (rng.random((6, 6)) < 0.4) * rng.standard_normal((6, 6))
        adj = SparseMatrix(sp.csr_matrix(dense))
        x = rng.standard_normal((6, 3))
        np.testing.assert_allclose(t.spmm(adj, Tensor(x)).data, dense @ x, atol=1e-12)

    def test_segment_softmax_sums_to_one_per_segment(self, rng):
        logits = Tensor(rng.standard_normal((12, 2)))
        idx = rng.integers(0, 4, 12)
        att = t.segment_softmax(logits, idx, n=4).data
        for s in range(4):
            rows = att[idx == s]
            if len(rows):
                np.testing.assert_allclose(rows.sum(axis=0), np.ones(2), atol=1e-12)

    def test_l2_normalize_rows_unit_norm(self, rng):
        x = Tensor(rng.standard_normal((8, 5)))
        y = t.l2_normalize_rows(x).data
        np.testing.assert_allclose(np.linalg.norm(y, axis=1), np.ones(8), atol=1e-9)

    def test_cross_entropy_uniform_logits_is_log_n(self):
        loss = t.cross_entropy(Tensor(np.zeros((4, 2))), [0, 1, 0, 1])
        np.testing.assert_allclose(loss.item(), math.log(2.0), atol=1e-12)

    def test_bce_with_logits_zero_logit_is_log_two(self):
        loss = t.binary_cross_entropy_with_logits(Tensor(np.zeros(5)), [1, 0, 1, 0, 1])
        np.testing.assert_allclose(loss.item(), math.log(2.0), atol=1e-12)

    def test_bce_extreme_logits_stable(self):
        loss = t.binary_cross_entropy_with_logits(Tensor([1000.0, -1000.0]), [1, 0])
        assert np.isfinite(loss.item()) and loss.item() < 1e-6


class TestBackward:
    def test_requires_scalar_loss(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            y = t.relu(x)
        with pytest.raises(ContractError):
            backward(y, tape)

    def test_fanout_accumulates(self):
        x = Tensor([[3.0]], requires_grad=True)
        with Tape() as tape:
            y = t.tsum(t.add(x, x))
        backward(y, tape)
        np.testing.assert_allclose(x.grad, [[2.0]])

    def test_grad_matches_finite_difference_per_op(self, rng):
        """Central finite differences across every differentiable operation."""
        n, d = 5, 4
        ops = {}

        def case(name):
            def deco(fn):
                ops[name] = fn
                return fn

            return deco

        x = Tensor(rng.standard_normal((n, d)), requires_grad=True)
        w = Tensor(rng.standard_normal((d, 3)), requires_grad=True)
        gain = Tensor(rng.standard_normal(d), requires_grad=True)
        bias = Tensor(rng.standard_normal(d), requires_grad=True)
        idx = rng.integers(0, n, 7)
        seg = rng.integers(0, 3, n)
        logits_labels = rng.integers(0, 3, n)
        bin_labels = rng.integers(0, 2, n)

        import scipy.sparse as sp

        dense = (rng.random((n, n)) < 0.5) * rng.standard_normal((n, n))
        adj = SparseMatrix(sp.csr_matrix(dense))
        c_row = Tensor(rng.standard_normal(d))

        case("matmul")(lambda: t.tsum(t.matmul(x, w)))
        case("add")(lambda: t.tsum(t.add(x, c_row)))
        case("mul_broadcast")(lambda: t.tsum(t.mul(x, t.slice_cols(x, 0, 1))))
        case("sub")(lambda: t.tsum(t.sub(x, t.relu(x))))
        case("relu")(lambda: t.tsum(t.relu(x)))
        case("sine")(lambda: t.tsum(t.sine(x)))
        case("sigmoid")(lambda: t.tsum(t.sigmoid(x)))
        case("tanh")(lambda: t.tsum(t.tanh(x)))
        case("identity")(lambda: t.tsum(t.identity(x)))
        case("leaky_relu")(lambda: t.tsum(t.leaky_relu(x)))
        case("softmax_rows")(lambda: t.tsum(t.mul(t.softmax_rows(x), Tensor(mask))))
        case("layer_norm")(lambda: t.tsum(t.sine(t.layer_norm(x, gain, bias))))
        case("l2_normalize")(lambda: t.tsum(t.mul(t.l2_normalize_rows(x), Tensor(mask))))
        case("gather")(lambda: t.tsum(t.sine(t.gather_rows(x, idx))))
        case("scatter_sum")(lambda: t.tsum(t.sine(t.scatter_aggregate(x, seg, 3, "sum"))))
        case("scatter_mean")(lambda: t.tsum(t.sine(t.scatter_aggregate(x, seg, 3, "mean"))))
        case("segment_softmax")(
            lambda: t.tsum(t.mul(t.segment_softmax(x, seg, 3), Tensor(mask)))
        )
        case("spmm")(lambda: t.tsum(t.sine(t.spmm(adj, x))))
        case("concat_slice")(
            lambda: t.tsum(t.sine(t.concat_cols([t.slice_cols(x, 0, 2), x])))
        )
        case("mean")(lambda: t.tmean(t.mul(x, x)))
        case("cross_entropy")(lambda: t.cross_entropy(t.matmul(x, w), logits_labels))
        case("bce")(
            lambda: t.binary_cross_entropy_with_logits(
                t.slice_cols(t.matmul(x, w), 0, 1), bin_labels
            )
        )
        case("dropout")(
            lambda: t.tsum(t.dropout(x, 0.3, True, np.random.default_rng(99)))
        )

        mask = rng.standard_normal((n, d))
        for name, build in ops.items():
            worst = check_gradients(build, [x, w, gain, bias], rng, n_points=10)
            assert worst < 1e-4, name


class TestAdamW:
    def test_first_step_size(self):
        p = Tensor([0.0], requires_grad=True)
        p.grad = np.array([1.0])
        opt = AdamW([p], lr=1e-3, weight_decay=0.0)
        opt.step()
        np.testing.assert_allclose(p.data, [-1e-3], atol=1e-9)

    def test_zero_grad_zero_decay_is_identity(self):
        p = Tensor([1.5, -2.5], requires_grad=True)
        p.grad = np.zeros(2)
        opt = AdamW([p], lr=1e-3, weight_decay=0.0)
        opt.step()
        np.testing.assert_allclose(p.data, [1.5, -2.5], atol=0)

    def test_pure_decay_shrinks_multiplicatively(self):
        p = Tensor([2.0], requires_grad=True)
        p.grad = np.zeros(1)
        opt = AdamW([p], lr=1e-3, weight_decay=0.1)
        opt.step()
        np.testing.assert_allclose(p.data, [2.0 * (1 - 1e-3 * 0.1)], atol=1e-15)

    def test_missing_gradient_raises(self):
        p = Tensor([1.0], requires_grad=True)
        opt = AdamW([p])
        with pytest.raises(ContractError):
            opt.step()

    def test_quadratic_descent(self):
        p = Tensor([4.0], requires_grad=True)
        opt = AdamW([p], lr=0.1, weight_decay=0.0)
        for _ in range(300):
            with Tape() as tape:
                loss = t.tsum(t.mul(p, p))
            backward(loss, tape)
            opt.step()
            opt.zero_grad()
        assert abs(p.data[0]) < 1e-2
