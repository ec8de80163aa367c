import math

import numpy as np
import pytest

from helpers import fd_gradient, max_rel_err

import hostcast.numerics as nm
from hostcast.errors import NumericalError, ShapeError, UsageError
from hostcast.numerics import (
    AdamState,
    Matrix,
    Tape,
    adam_step,
    backward,
    matrix,
    parameter,
)


def rand(rng, r, c, tracked=False):
    return Matrix(rng.standard_normal((r, c)), tracked=tracked)


class TestMatmul:
    def test_identity(self):
        m = matrix([[1.0, 2.0], [3.0, 4.0]])
        out = nm.matmul(nm.eye(2), m)
        np.testing.assert_array_equal(out.data, m.data)

    def test_hand_product(self):
        a = matrix([[1.0, 2.0], [3.0, 4.0]])
        b = matrix([[0.0], [1.0]])
        np.testing.assert_array_equal(nm.matmul(a, b).data, [[2.0], [4.0]])

    def test_zero_matrix(self):
        z = nm.zeros(2, 2)
        m = matrix([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(nm.matmul(z, m).data, np.zeros((2, 2)))

    def test_shape_mismatch_names_both_shapes(self):
        a, b = nm.zeros(2, 3), nm.zeros(2, 3)
        with pytest.raises(ShapeError, match="2x3 @ 2x3"):
            nm.matmul(a, b)

    def test_associativity(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            a, b, c = (rand(rng, 4, 4) for _ in range(3))
            left = nm.matmul(nm.matmul(a, b), c).data
            right = nm.matmul(a, nm.matmul(b, c)).data
            assert np.max(np.abs(left - right)) < 1e-10

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        a, b = rand(rng, 5, 6), rand(rng, 6, 4)
        one = nm.matmul(a, b).data
        two = nm.matmul(a, b).data
        assert np.array_equal(one, two)


class TestElementwise:
    def test_hadamard_ones_zeros(self):
        m = matrix([[1.0, -2.0], [0.5, 3.0]])
        ones = Matrix(np.ones((2, 2)))
        np.testing.assert_array_equal(nm.hadamard(m, ones).data, m.data)
        np.testing.assert_array_equal(nm.hadamard(m, nm.zeros(2, 2)).data, np.zeros((2, 2)))

    def test_hadamard_hand(self):
        out = nm.hadamard(matrix([[1.0, 2.0]]), matrix([[3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[3.0, 8.0]])

    def test_hadamard_shape_mismatch(self):
        with pytest.raises(ShapeError):
            nm.hadamard(nm.zeros(2, 2), nm.zeros(2, 3))

    def test_sigmoid_tanh_at_zero(self):
        z = nm.zeros(1, 3)
        np.testing.assert_array_equal(nm.sigmoid(z).data, np.full((1, 3), 0.5))
        np.testing.assert_array_equal(nm.tanh(z).data, np.zeros((1, 3)))

    def test_sigmoid_matches_high_precision_at_50(self):
        x = matrix([[50.0, -50.0]])
        got = nm.sigmoid(x).data
        want_pos = 1.0 / (1.0 + math.exp(-50.0))
        want_neg = math.exp(-50.0) / (1.0 + math.exp(-50.0))
        assert got[0, 0] == pytest.approx(want_pos, rel=1e-15)
        assert got[0, 1] == pytest.approx(want_neg, rel=1e-15)

    def test_sigmoid_extreme_inputs_stay_finite(self):
        with np.errstate(over="raise"):
            out = nm.sigmoid(matrix([[800.0, -800.0]])).data
        assert np.all(np.isfinite(out))
        assert out[0, 0] <= 1.0 and out[0, 1] >= 0.0

    def test_bias_broadcast_add(self):
        a = matrix([[1.0, 2.0], [3.0, 4.0]])
        b = matrix([[10.0, 20.0]])
        np.testing.assert_array_equal(nm.add(a, b).data, [[11.0, 22.0], [13.0, 24.0]])


class TestSoftmax:
    def test_equal_values_uniform(self):
        out = nm.softmax_rows(Matrix(np.full((3, 4), 2.5))).data
        np.testing.assert_allclose(out, np.full((3, 4), 0.25), atol=1e-15)

    def test_closed_form(self):
        out = nm.softmax_rows(matrix([[0.0, math.log(3.0)]])).data
        np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-15)

    def test_single_column_all_ones(self):
        out = nm.softmax_rows(matrix([[3.0], [-7.0]])).data
        np.testing.assert_array_equal(out, [[1.0], [1.0]])

    def test_rows_sum_to_one_and_shift_invariant(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            a = rng.standard_normal((4, 6)) * 10
            y = nm.softmax_rows(Matrix(a)).data
            assert np.max(np.abs(y.sum(axis=1) - 1.0)) < 1e-12
            shifted = nm.softmax_rows(Matrix(a + 123.456)).data
            assert np.max(np.abs(y - shifted)) < 1e-12


class TestBackward:
    def test_sum_gradient_is_ones(self):
        m = parameter([[1.0, 2.0], [3.0, 4.0]])
        with Tape() as tape:
            loss = nm.sum_all(m)
        grads = backward(tape, loss)
        np.testing.assert_array_equal(grads.get(m), np.ones((2, 2)))

    def test_matmul_gradient_hand(self):
        rng = np.random.default_rng(5)
        a = Matrix(rng.standard_normal((3, 4)), tracked=True)
        b = Matrix(rng.standard_normal((4, 2)), tracked=True)
        with Tape() as tape:
            loss = nm.sum_all(nm.matmul(a, b))
        grads = backward(tape, loss)
        ones = np.ones((3, 2))
        np.testing.assert_allclose(grads.get(a), ones @ b.data.T, atol=1e-12)
        np.testing.assert_allclose(grads.get(b), a.data.T @ ones, atol=1e-12)

    def test_backward_twice_is_fatal(self):
        m = parameter([[1.0]])
        with Tape() as tape:
            loss = nm.sum_all(m)
        backward(tape, loss)
        with pytest.raises(UsageError):
            backward(tape, loss)

    def test_non_scalar_loss_rejected(self):
        m = parameter([[1.0, 2.0]])
        with Tape() as tape:
            y = nm.scale(m, 2.0)
        with pytest.raises(ShapeError):
            backward(tape, y)

    def test_untracked_leaf_gets_zeros(self):
        m = parameter([[1.0]])
        other = parameter([[9.0]])
        with Tape() as tape:
            loss = nm.sum_all(m)
        grads = backward(tape, loss)
        np.testing.assert_array_equal(grads.get(other), np.zeros((1, 1)))

    def composite(self, a, b, bias, c):
        z = nm.add(nm.matmul(a, b), bias)
        y = nm.hadamard(nm.tanh(z), nm.sigmoid(c))
        p = nm.softmax_rows(y)
        picked = nm.take_per_row(p, np.array([0, 2, 1]))
        return nm.scale(nm.sum_all(nm.log(picked, floor=1e-12)), -1.0 / 3.0)

    def test_composite_matches_finite_differences(self):
        rng = np.random.default_rng(17)
        a = Matrix(rng.standard_normal((3, 5)), tracked=True)
        b = Matrix(rng.standard_normal((5, 4)), tracked=True)
        bias = Matrix(rng.standard_normal((1, 4)), tracked=True)
        c = Matrix(rng.standard_normal((3, 4)), tracked=True)
        with Tape() as tape:
            loss = self.composite(a, b, bias, c)
        grads = backward(tape, loss)

        def forward():
            return self.composite(a, b, bias, c).data[0, 0]

        for p in (a, b, bias, c):
            assert max_rel_err(grads.get(p), fd_gradient(forward, p)) < 1e-4

    def test_structural_ops_match_finite_differences(self):
        rng = np.random.default_rng(23)
        a = Matrix(rng.standard_normal((4, 3)), tracked=True)
        b = Matrix(rng.standard_normal((2, 3)), tracked=True)

        def build():
            stacked = nm.concat_rows([a, b])          # 6x3
            folded = nm.fold_batch(stacked, 2)        # 3x6
            back = nm.unfold_batch(folded, 2)         # 6x3
            left = nm.select_cols(back, 0, 2)
            top = nm.select_rows(left, 1, 5)
            wide = nm.concat_cols([top, nm.scale(top, -0.5)])
            return nm.sum_all(nm.hadamard(wide, wide))

        with Tape() as tape:
            loss = build()
        grads = backward(tape, loss)
        for p in (a, b):
            assert max_rel_err(grads.get(p), fd_gradient(lambda: build().data[0, 0], p)) < 1e-4

    def test_same_matrix_as_both_operands(self):
        rng = np.random.default_rng(31)
        a = Matrix(rng.standard_normal((3, 3)), tracked=True)
        with Tape() as tape:
            loss = nm.sum_all(nm.hadamard(a, a))
        g = backward(tape, loss).get(a)
        np.testing.assert_allclose(g, 2.0 * a.data, atol=1e-12)
        with Tape() as tape:
            loss = nm.sum_all(nm.matmul(a, a))
        g = backward(tape, loss).get(a)
        ones = np.ones((3, 3))
        np.testing.assert_allclose(g, ones @ a.data.T + a.data.T @ ones, atol=1e-12)

    def test_log_floor_blocks_gradient(self):
        m = parameter([[0.5, 1e-15]])
        with Tape() as tape:
            loss = nm.sum_all(nm.log(m, floor=1e-12))
        g = backward(tape, loss).get(m)
        assert g[0, 0] == pytest.approx(2.0)
        assert g[0, 1] == 0.0

    def test_fold_unfold_roundtrip(self):
        rng = np.random.default_rng(2)
        a = Matrix(rng.standard_normal((6, 4)))
        again = nm.unfold_batch(nm.fold_batch(a, 3), 3)
        np.testing.assert_array_equal(again.data, a.data)
        # fold really groups batch items into column blocks
        folded = nm.fold_batch(a, 3)
        np.testing.assert_array_equal(folded.data[:, 4:8], a.data[2:4])


class TestAdam:
    def test_zero_gradient_no_decay_is_identity(self):
        w = {"w": parameter([[1.0, -2.0]])}
        out = adam_step(w, {"w": np.zeros((1, 2))}, AdamState(), lr=0.1, weight_decay=0.0, t=1)
        np.testing.assert_array_equal(out["w"].data, w["w"].data)

    def test_moves_against_gradient_sign(self):
        w = {"w": parameter([[0.0]])}
        state = AdamState()
        for t in range(1, 51):
            w = adam_step(w, {"w": np.array([[3.0]])}, state, lr=0.01, weight_decay=0.0, t=t)
        assert w["w"].data[0, 0] < 0.0

    def test_quadratic_bowl_converges(self):
        w = {"w": parameter([[1.0]])}
        state = AdamState()
        losses = []
        for t in range(1, 5001):
            value = w["w"].data[0, 0]
            losses.append(value * value)
            w = adam_step(w, {"w": np.array([[2.0 * value]])}, state, lr=1e-3, weight_decay=0.0, t=t)
        assert abs(w["w"].data[0, 0]) < 0.01
        # optimizer as its own oracle: early descent is monotone, and no step
        # ever climbs back above the starting loss
        assert all(b <= a + 1e-12 for a, b in zip(losses[:500], losses[1:501]))
        assert max(losses) == losses[0]

    def test_nonfinite_gradient_names_tensor(self):
        w = {"w_xi_0": parameter([[1.0]])}
        with pytest.raises(NumericalError, match="w_xi_0"):
            adam_step(w, {"w_xi_0": np.array([[np.nan]])}, AdamState(), lr=1e-3, weight_decay=0.0, t=1)

    def test_weight_decay_shrinks_weights(self):
        w = {"w": parameter([[2.0]])}
        out = adam_step(w, {"w": np.zeros((1, 1))}, AdamState(), lr=0.01, weight_decay=0.1, t=1)
        assert out["w"].data[0, 0] < 2.0
