import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from committee_kd import tensor as T
from committee_kd.tensor import Parameter, ShapeMismatchError, Tape, Tensor

from gradcheck import check_gradients, op_cases


class TestForwardValues:
    def test_matmul_identity(self):
        out = T.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])

    def test_matmul_hand_case(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_matmul_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeMismatchError) as err:
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        assert "(2, 3)" in str(err.value)

    def test_sigmoid_zero_is_exactly_half(self):
        assert T.sigmoid(Tensor(0.0)).item() == 0.5

    def test_sigmoid_log3(self):
        assert T.sigmoid(Tensor(math.log(3.0))).item() == pytest.approx(0.75, abs=1e-15)

    def test_sigmoid_extreme_inputs_stay_inside_open_interval(self):
        out = T.sigmoid(Tensor([-1000.0, 1000.0])).data
        assert np.all(np.isfinite(out))
        assert out[0] > 0.0 and out[1] < 1.0

    def test_div_hand_case(self):
        out = T.div(Tensor([6.0, 1.0]), Tensor([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [2.0, 0.25])

    def test_div_by_self_is_exactly_one(self):
        x = np.random.default_rng(9).uniform(0.01, 1.0, size=5)
        np.testing.assert_array_equal(T.div(Tensor(x), Tensor(x)).data, np.ones(5))

    def test_div_shape_mismatch_rejected(self):
        with pytest.raises(ShapeMismatchError):
            T.div(Tensor([1.0]), Tensor([1.0, 2.0]))

    def test_mse_identity_is_zero(self):
        assert T.mse_loss(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).item() == 0.0

    def test_mse_hand_case(self):
        assert T.mse_loss(Tensor([2.0, 0.0]), Tensor([0.0, 0.0])).item() == 2.0

    def test_mse_matches_loop_oracle(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=7), rng.normal(size=7)
        expected = sum((x - y) ** 2 for x, y in zip(a, b)) / 7
        assert T.mse_loss(Tensor(a), Tensor(b)).item() == pytest.approx(expected, rel=1e-12)

    def test_l2_divergence_same_contract_as_mse(self):
        assert T.l2_divergence(Tensor([2.0, 0.0]), Tensor([0.0, 0.0])).item() == 2.0
        with pytest.raises(ShapeMismatchError):
            T.l2_divergence(Tensor([1.0]), Tensor([1.0, 2.0]))

    def test_contract3_zero_input(self):
        out = T.contract3(Tensor(np.zeros(3)), Tensor(np.ones((3, 2, 2))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 2)))

    def test_contract3_scalar_scaling(self):
        w = np.zeros((1, 1, 2))
        w[0] = [[1.0, 3.0]]
        out = T.contract3(Tensor([2.0]), Tensor(w))
        np.testing.assert_array_equal(out.data, [[2.0, 6.0]])

    def test_contract3_matches_triple_loop(self):
        rng = np.random.default_rng(9)
        x, w = rng.normal(size=3), rng.normal(size=(3, 2, 2))
        out = T.contract3(Tensor(x), Tensor(w)).data
        for j in range(2):
            for k in range(2):
                expected = sum(x[i] * w[i, j, k] for i in range(3))
                assert out[j, k] == pytest.approx(expected, rel=1e-12)

    def test_embedding_lookup_rows(self):
        table = Tensor(np.arange(8.0).reshape(4, 2))
        out = T.embedding_lookup(table, np.array([2, 0, 2]))
        np.testing.assert_array_equal(out.data, [[4.0, 5.0], [0.0, 1.0], [4.0, 5.0]])

    def test_embedding_lookup_out_of_range(self):
        with pytest.raises(IndexError):
            T.embedding_lookup(Tensor(np.zeros((3, 2))), np.array([3]))

    def test_embedding_bag_mean_matches_loop(self):
        rng = np.random.default_rng(2)
        table = rng.normal(size=(5, 3))
        flat = np.array([0, 1, 4, 2])
        offsets = np.array([0, 2, 2, 4])  # middle bag empty
        out = T.embedding_bag_mean(Tensor(table), flat, offsets).data
        np.testing.assert_allclose(out[0], (table[0] + table[1]) / 2)
        np.testing.assert_array_equal(out[1], np.zeros(3))
        np.testing.assert_allclose(out[2], (table[4] + table[2]) / 2)


class TestTape:
    def test_backward_replays_in_exact_reverse_order(self):
        tape = Tape()
        seen = []
        loss = Tensor(np.asarray(0.0), requires_grad=True)
        tape.record(loss, lambda g: seen.append("first"))
        tape.record(loss, lambda g: seen.append("second"))
        T.backward(loss, tape)
        assert seen == ["second", "first"]

    def test_cleared_tape_accumulates_nothing(self):
        with T.new_tape() as tape:
            x = Tensor([1.0, 2.0], requires_grad=True)
            loss = T.mean_all(T.mul(x, x))
            tape.clear()
            T.backward(loss)
        assert x.grad is None

    def test_no_tape_blocks_recording(self):
        with T.new_tape() as tape:
            x = Tensor([1.0], requires_grad=True)
            with T.no_tape():
                y = T.relu(x)
            assert not y.requires_grad
            assert len(tape) == 0

    def test_backward_rejects_non_scalar(self):
        with T.new_tape():
            x = Tensor([1.0, 2.0], requires_grad=True)
            y = T.relu(x)
            with pytest.raises(ShapeMismatchError):
                T.backward(y)

    def test_constant_loss_writes_no_gradients(self):
        with T.new_tape():
            x = Tensor([3.0], requires_grad=True)
            loss = T.mean_all(Tensor([5.0]))
            T.backward(loss)
        assert x.grad is None

    def test_linear_regression_closed_form_gradient(self):
        # loss = (w*x - y)^2 -> dloss/dw = 2(w*x - y)*x
        w = Tensor(np.asarray([1.5]), requires_grad=True)
        x, y = 2.0, 1.0
        with T.new_tape():
            pred = T.scale(w, x)
            loss = T.mse_loss(pred, Tensor([y]))
            T.backward(loss)
        assert w.grad[0] == pytest.approx(2.0 * (1.5 * x - y) * x, rel=1e-12)

    def test_gradient_accumulates_across_uses(self):
        x = Tensor(np.asarray([2.0]), requires_grad=True)
        with T.new_tape():
            loss = T.mean_all(T.mul(x, x))  # both operands are x
            T.backward(loss)
        assert x.grad[0] == pytest.approx(4.0)


class TestFrozenParameters:
    def test_frozen_suppresses_accumulation(self):
        p = Parameter(np.ones(3), "w", frozen=True)
        with T.new_tape():
            loss = T.mean_all(T.mul(p.tensor, p.tensor))
            T.backward(loss)
        np.testing.assert_array_equal(p.grad, np.zeros(3))

    def test_unfreezing_restores_gradients(self):
        p = Parameter(np.ones(3), "w", frozen=True)
        p.set_frozen(False)
        with T.new_tape():
            T.backward(T.mean_all(T.mul(p.tensor, p.tensor)))
        assert np.all(p.grad != 0.0)


@pytest.mark.parametrize("name", sorted(op_cases(np.random.default_rng(0))))
def test_gradients_match_finite_differences(name):
    for trial in range(20):
        build_loss, arrays = op_cases(np.random.default_rng(100 + trial))[name]
        check_gradients(build_loss, arrays)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=8))
def test_sigmoid_range_open_interval(values):
    out = T.sigmoid(Tensor(values)).data
    assert np.all(out > 0.0) and np.all(out < 1.0)


@given(st.lists(st.floats(-10.0, 10.0), min_size=1, max_size=8))
def test_sigmoid_symmetry(values):
    z = np.asarray(values)
    np.testing.assert_allclose(T.sigmoid(Tensor(z)).data + T.sigmoid(Tensor(-z)).data,
                               np.ones_like(z), rtol=1e-12)


@given(st.lists(st.floats(-100.0, 100.0), min_size=1, max_size=6),
       st.lists(st.floats(-100.0, 100.0), min_size=1, max_size=6))
def test_mse_non_negative(a, b):
    size = min(len(a), len(b))
    loss = T.mse_loss(Tensor(a[:size]), Tensor(b[:size])).item()
    assert loss >= 0.0


@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 31 - 1))
def test_concat_preserves_parts(left, right, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, left)), rng.normal(size=(2, right))
    out = T.concat([Tensor(a), Tensor(b)], axis=-1).data
    np.testing.assert_array_equal(out[:, :left], a)
    np.testing.assert_array_equal(out[:, left:], b)


@given(st.integers(0, 2 ** 31 - 1))
def test_forward_is_deterministic(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4))
    first = T.sigmoid(T.matmul(Tensor(x), Tensor(x.T))).data
    second = T.sigmoid(T.matmul(Tensor(x), Tensor(x.T))).data
    np.testing.assert_array_equal(first, second)
