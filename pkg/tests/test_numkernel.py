"""Kernel operation contracts: forward values, shape errors and gradients.

Every differentiable operation is certified against central finite
differences (step 1e-5): linear/softmax-level ops at relative error 1e-6,
attention and convolution composites at 1e-4.
"""

import math

import numpy as np
import pytest

import helprank.numkernel as nk
from helprank.numkernel import (
    AttentionParams,
    DimensionError,
    Parameter,
    Rng,
    Tensor,
    finite_difference_check,
)


def _rng(seed=0):
    return Rng(seed)


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        eye = Tensor(np.eye(2))
        assert np.array_equal(nk.matmul(eye, a).value, a.value)

    def test_hand_product(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[0.0], [1.0]])
        assert np.array_equal(nk.matmul(a, b).value, [[2.0], [4.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            nk.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_gradient_matches_finite_differences(self):
        rng = _rng(1)
        a = Parameter(rng.normal(size=(3, 4)))
        b = Parameter(rng.normal(size=(4, 2)))
        report = finite_difference_check(lambda: nk.matmul(a, b), [a, b], tol=1e-6)
        assert report.passed, report

    def test_gradient_closed_form(self):
        # d sum(a @ b) / da = ones @ b.T exactly
        rng = _rng(2)
        a = Parameter(rng.normal(size=(3, 4)))
        b = Parameter(rng.normal(size=(4, 2)))
        out = nk.matmul(a, b)
        out.backward()
        expected = np.ones((3, 2)) @ b.value.T
        np.testing.assert_allclose(a.grad, expected, atol=1e-12)


class TestSoftmaxRow:
    def test_uniform_on_constant_row(self):
        out = nk.softmax_row(Tensor([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.value, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)

    def test_direct_evaluation(self):
        out = nk.softmax_row(Tensor([[4.0, 0.0]]))
        e4 = math.exp(4.0)
        np.testing.assert_allclose(
            out.value, [[e4 / (e4 + 1.0), 1.0 / (e4 + 1.0)]], atol=1e-15
        )

    def test_no_overflow_on_large_logits(self):
        out = nk.softmax_row(Tensor([[1000.0, 0.0]])).value
        assert np.isfinite(out).all()
        assert out[0, 0] == pytest.approx(1.0)
        assert out[0, 1] == pytest.approx(0.0, abs=1e-300)

    def test_rows_sum_to_one(self):
        rng = _rng(3)
        out = nk.softmax_row(Tensor(rng.normal(size=(50, 7)) * 10.0))
        np.testing.assert_allclose(out.value.sum(axis=1), 1.0, atol=1e-12)

    def test_gradient(self):
        rng = _rng(4)
        x = Parameter(rng.normal(size=(3, 5)))
        report = finite_difference_check(lambda: nk.softmax_row(x), [x], tol=1e-6)
        assert report.passed, report


class TestElementwise:
    def test_sigmoid_of_zero(self):
        assert nk.sigmoid(Tensor([[0.0]])).value[0, 0] == 0.5

    def test_sigmoid_strictly_inside_unit_interval(self):
        rng = _rng(5)
        out = nk.sigmoid(Tensor(rng.normal(size=(20, 5)) * 5.0)).value
        assert (out > 0).all() and (out < 1).all()

    def test_tanh_of_zero(self):
        assert nk.tanh(Tensor([[0.0]])).value[0, 0] == 0.0

    def test_gradients(self):
        rng = _rng(6)
        x = Parameter(rng.normal(size=(3, 4)))
        for op in (nk.sigmoid, nk.tanh):
            report = finite_difference_check(lambda: op(x), [x], tol=1e-6)
            assert report.passed, (op.__name__, report)


class TestConcat:
    def test_concat_cols_preserves_order(self):
        a = Tensor(np.arange(6.0).reshape(2, 3))
        b = Tensor(np.arange(4.0).reshape(2, 2) + 100.0)
        out = nk.concat_cols(a, b)
        assert out.shape == (2, 5)
        np.testing.assert_array_equal(out.value[:, :3], a.value)
        np.testing.assert_array_equal(out.value[:, 3:], b.value)

    def test_row_count_mismatch_raises(self):
        with pytest.raises(DimensionError):
            nk.concat_cols(Tensor(np.zeros((2, 2))), Tensor(np.zeros((3, 2))))

    def test_concat_rows_gradient_splits(self):
        rng = _rng(7)
        a = Parameter(rng.normal(size=(2, 3)))
        b = Parameter(rng.normal(size=(4, 3)))
        report = finite_difference_check(
            lambda: nk.concat_rows(a, b), [a, b], tol=1e-6
        )
        assert report.passed, report


class TestMeanPool:
    def test_single_row_identity(self):
        row = np.array([[1.0, -2.0, 3.0]])
        np.testing.assert_array_equal(nk.mean_pool_rows(Tensor(row)).value, row)

    def test_hand_mean(self):
        out = nk.mean_pool_rows(Tensor([[0.0, 2.0], [2.0, 0.0]]))
        np.testing.assert_array_equal(out.value, [[1.0, 1.0]])

    def test_commutes_with_scaling(self):
        rng = _rng(8)
        x = rng.normal(size=(5, 4))
        pooled_then_scaled = nk.scale(nk.mean_pool_rows(Tensor(x)), 3.7).value
        scaled_then_pooled = nk.mean_pool_rows(nk.scale(Tensor(x), 3.7)).value
        np.testing.assert_allclose(pooled_then_scaled, scaled_then_pooled, atol=1e-12)

    def test_empty_input_raises(self):
        with pytest.raises(DimensionError):
            nk.mean_pool_rows(Tensor(np.zeros((0, 3))))

    def test_gradient(self):
        rng = _rng(9)
        x = Parameter(rng.normal(size=(4, 3)))
        report = finite_difference_check(lambda: nk.mean_pool_rows(x), [x], tol=1e-6)
        assert report.passed, report


class TestSegmentOps:
    def test_segment_mean_matches_per_block_pooling(self):
        rng = _rng(10)
        x = rng.normal(size=(6, 3))
        out = nk.segment_mean(Tensor(x), (2, 1, 3)).value
        np.testing.assert_allclose(out[0], x[:2].mean(axis=0), atol=1e-15)
        np.testing.assert_allclose(out[1], x[2], atol=1e-15)
        np.testing.assert_allclose(out[2], x[3:].mean(axis=0), atol=1e-15)

    def test_segment_mean_gradient(self):
        rng = _rng(11)
        x = Parameter(rng.normal(size=(6, 3)))
        report = finite_difference_check(
            lambda: nk.segment_mean(x, (2, 1, 3)), [x], tol=1e-6
        )
        assert report.passed, report

    def test_take_rows_gather_and_gradient(self):
        rng = _rng(12)
        x = Parameter(rng.normal(size=(4, 3)))
        idx = [0, 2, 2, 3]
        np.testing.assert_array_equal(nk.take_rows(x, idx).value, x.value[idx])
        report = finite_difference_check(lambda: nk.take_rows(x, idx), [x], tol=1e-6)
        assert report.passed, report


class TestConv1d:
    def test_kernel_one_identity_filter(self):
        rng = _rng(13)
        x = rng.normal(size=(5, 3))
        filters = Tensor(np.eye(3))
        bias = Tensor(np.zeros((1, 3)))
        out = nk.conv1d(Tensor(x), filters, bias, kernel=1)
        np.testing.assert_allclose(out.value, x, atol=1e-15)

    def test_zero_input_zero_bias_gives_zero(self):
        rng = _rng(14)
        filters = Tensor(rng.normal(size=(9, 4)))
        bias = Tensor(np.zeros((1, 4)))
        out = nk.conv1d(Tensor(np.zeros((6, 3))), filters, bias, kernel=3)
        np.testing.assert_array_equal(out.value, np.zeros((6, 4)))

    def test_even_kernel_rejected(self):
        with pytest.raises(DimensionError):
            nk.conv1d(Tensor(np.zeros((4, 2))), Tensor(np.zeros((4, 2))),
                      Tensor(np.zeros((1, 2))), kernel=2)

    def test_empty_sequence_rejected(self):
        with pytest.raises(DimensionError):
            nk.conv1d(Tensor(np.zeros((0, 2))), Tensor(np.zeros((6, 2))),
                      Tensor(np.zeros((1, 2))), kernel=3)

    def test_gradient(self):
        rng = _rng(15)
        x = Parameter(rng.normal(size=(5, 3)))
        filters = Parameter(rng.normal(size=(9, 4)))
        bias = Parameter(rng.normal(size=(1, 4)))
        report = finite_difference_check(
            lambda: nk.conv1d(x, filters, bias, kernel=3), [x, filters, bias],
            tol=1e-4,
        )
        assert report.passed, report

    def test_segmented_equals_per_segment(self):
        rng = _rng(16)
        x = rng.normal(size=(7, 3))
        filters = Tensor(rng.normal(size=(9, 2)))
        bias = Tensor(rng.normal(size=(1, 2)))
        joint = nk.conv1d(Tensor(x), filters, bias, kernel=3, lengths=(3, 4)).value
        first = nk.conv1d(Tensor(x[:3]), filters, bias, kernel=3).value
        second = nk.conv1d(Tensor(x[3:]), filters, bias, kernel=3).value
        np.testing.assert_allclose(joint, np.vstack([first, second]), atol=1e-12)


class TestSelfAttention:
    def test_singleton_sequence_is_value_projection(self):
        rng = _rng(17)
        params = AttentionParams.create(rng, 4, 4)
        x = Tensor(rng.normal(size=(1, 4)))
        out = nk.self_attention(x, params)
        expected = x.value @ params.wv.value + params.bv.value
        np.testing.assert_allclose(out.value, expected, atol=1e-12)

    def test_weight_rows_sum_to_one(self):
        rng = _rng(18)
        params = AttentionParams.create(rng, 5, 5)
        x = Tensor(rng.normal(size=(7, 5)))
        weights = nk.attention_weights(x, params).value
        np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-12)
        assert (weights >= 0).all()

    def test_dimension_mismatch(self):
        rng = _rng(19)
        params = AttentionParams.create(rng, 4, 4)
        with pytest.raises(DimensionError):
            nk.self_attention(Tensor(np.zeros((3, 5))), params)

    def test_gradients_of_all_projections(self):
        rng = _rng(20)
        params = AttentionParams.create(rng, 4, 3)
        x = Parameter(rng.normal(size=(5, 4)))
        report = finite_difference_check(
            lambda: nk.self_attention(x, params),
            [x] + params.parameters(),
            tol=1e-4,
        )
        assert report.passed, report

    def test_segmented_equals_per_segment(self):
        rng = _rng(21)
        params = AttentionParams.create(rng, 4, 4)
        x = rng.normal(size=(6, 4))
        joint = nk.self_attention(Tensor(x), params, lengths=(2, 3, 1)).value
        parts = [
            nk.self_attention(Tensor(block), params).value
            for block in (x[:2], x[2:5], x[5:])
        ]
        np.testing.assert_allclose(joint, np.vstack(parts), atol=1e-12)

    def test_segmented_gradient(self):
        rng = _rng(22)
        params = AttentionParams.create(rng, 3, 3)
        x = Parameter(rng.normal(size=(5, 3)))
        report = finite_difference_check(
            lambda: nk.self_attention(x, params, lengths=(2, 3)),
            [x] + params.parameters(),
            tol=1e-4,
        )
        assert report.passed, report


class TestFiniteDifferenceHarness:
    def test_linear_op_error_near_machine_epsilon(self):
        rng = _rng(23)
        x = Parameter(rng.normal(size=(3, 3)))
        report = finite_difference_check(lambda: nk.scale(x, 2.0), [x], tol=1e-6)
        assert report.max_rel_error < 1e-9

    def test_detects_a_broken_gradient(self):
        # an op whose registered backward is deliberately wrong by 2x
        rng = _rng(24)
        x = Parameter(rng.normal(size=(2, 2)))

        def broken():
            return Tensor(x.value * 3.0, (x,), lambda g: (g * 6.0,))

        report = finite_difference_check(broken, [x], tol=1e-6)
        assert not report.passed
        assert report.max_rel_error > 0.1


class TestGraph:
    def test_shared_node_gradient_accumulates(self):
        # y = x + x doubles the upstream gradient
        x = Parameter(np.array([[1.0, 2.0]]))
        out = nk.add(x, x)
        out.backward()
        np.testing.assert_array_equal(x.grad, [[2.0, 2.0]])

    def test_operations_are_pure(self):
        rng = _rng(25)
        x = rng.normal(size=(4, 4))
        params = AttentionParams.create(_rng(26), 4, 4)
        a = nk.self_attention(Tensor(x), params).value
        b = nk.self_attention(Tensor(x), params).value
        np.testing.assert_array_equal(a, b)

    def test_finite_outputs_on_finite_inputs(self):
        rng = _rng(27)
        x = Tensor(rng.normal(size=(6, 5)) * 100.0)
        params = AttentionParams.create(rng, 5, 5)
        for t in (nk.softmax_row(x), nk.sigmoid(x), nk.tanh(x),
                  nk.self_attention(x, params)):
            assert np.isfinite(t.value).all()


class TestRng:
    def test_same_seed_same_sequence(self):
        a, b = Rng(42), Rng(42)
        for _ in range(5):
            assert a.uniform() == b.uniform()
        assert a.integers(0, 1000) == b.integers(0, 1000)

    def test_split_streams_are_deterministic_and_distinct(self):
        a = Rng(42).split(3)
        b = Rng(42).split(3)
        c = Rng(42).split(4)
        va, vb, vc = a.normal(size=8), b.normal(size=8), c.normal(size=8)
        np.testing.assert_array_equal(va, vb)
        assert not np.array_equal(va, vc)

    def test_split_independent_of_parent_position(self):
        parent = Rng(7)
        parent.uniform(size=100)
        late_child = parent.split(1)
        fresh_child = Rng(7).split(1)
        np.testing.assert_array_equal(
            late_child.normal(size=4), fresh_child.normal(size=4)
        )
