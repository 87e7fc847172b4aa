import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softattn import tensor as T
from softattn.errors import AxisError, ContractError, NumericError, ParameterError, ShapeError
from softattn.tensor import Parameter, Tape, Tensor, finite_diff_check, seeded_rng


class TestTensorBasics:
    def test_data_is_read_only_copy(self):
        src = np.ones((2, 2))
        t = Tensor(src)
        src[0, 0] = 5.0
        assert t.data[0, 0] == 1.0
        with pytest.raises(ValueError):
            t.data[0, 0] = 3.0

    def test_zero_dim_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 0)))

    def test_zeros_empty_shape_rejected(self):
        with pytest.raises(ShapeError):
            T.zeros(())

    def test_randn_seeded(self):
        a = T.randn((3, 4), seeded_rng(7)).data
        b = T.randn((3, 4), seeded_rng(7)).data
        np.testing.assert_array_equal(a, b)

    def test_randn_bad_stddev(self):
        with pytest.raises(ParameterError):
            T.randn((2,), seeded_rng(0), stddev=0.0)

    def test_operators(self):
        a, b = Tensor([[1.0, 2.0]]), Tensor([[3.0, 5.0]])
        np.testing.assert_array_equal((a + b).data, [[4.0, 7.0]])
        np.testing.assert_array_equal((a - b).data, [[-2.0, -3.0]])
        np.testing.assert_array_equal((a * b).data, [[3.0, 10.0]])
        np.testing.assert_array_equal((a @ Tensor([[1.0], [1.0]])).data, [[3.0]])
        assert a.sum().item() == 3.0


class TestBroadcasting:
    def test_trailing_singleton_broadcast(self):
        a = Tensor(np.ones((2, 3, 4)))
        b = Tensor(np.full((2, 3, 1), 2.0))
        np.testing.assert_array_equal(T.mul(a, b).data, np.full((2, 3, 4), 2.0))

    def test_other_shapes_rejected(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3,))))

    def test_broadcast_grad_sums_over_last_axis(self):
        a = Parameter(np.arange(6.0).reshape(2, 3))
        b = Parameter(np.array([[2.0], [3.0]]))
        with Tape() as tape:
            loss = T.reduce_sum(T.mul(a, b))
        tape.backward(loss)
        np.testing.assert_array_equal(b.grad, [[3.0], [12.0]])
        np.testing.assert_array_equal(a.grad, [[2.0] * 3, [3.0] * 3])


class TestReductions:
    def test_bad_axis(self):
        with pytest.raises(AxisError):
            T.reduce_sum(Tensor(np.ones((2, 2))), axes=2)

    def test_keepdims(self):
        out = T.reduce_sum(Tensor(np.ones((2, 3))), axes=-1, keepdims=True)
        assert out.shape == (2, 1)

    def test_concat_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.concat([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2)))], axis=-1)


class TestTape:
    def test_non_scalar_loss(self):
        p = Parameter(np.ones(3))
        with Tape() as tape:
            y = T.mul(p, p)
        with pytest.raises(ContractError):
            tape.backward(y)

    def test_loss_from_other_tape(self):
        p = Parameter(np.ones(3))
        with Tape():
            y = T.reduce_sum(p)
        with pytest.raises(ContractError):
            Tape().backward(y)

    def test_untracked_ops_not_recorded(self):
        with Tape() as tape:
            T.add(Tensor(np.ones(2)), Tensor(np.ones(2)))
        assert len(tape) == 0

    def test_frozen_parameter_gets_no_grad(self):
        p = Parameter(np.ones(2), trainable=False)
        q = Parameter(np.ones(2))
        with Tape() as tape:
            loss = T.reduce_sum(T.mul(p, q))
        tape.backward(loss)
        np.testing.assert_array_equal(p.grad, 0.0)
        np.testing.assert_array_equal(q.grad, 1.0)

    def test_grad_of_intermediate(self):
        p = Parameter(np.array([1.0, -2.0]))
        with Tape() as tape:
            mid = T.scale(p, 3.0)
            loss = T.reduce_sum(T.mul(mid, mid))
        tape.backward(loss)
        np.testing.assert_allclose(tape.grad(mid), 2 * mid.data)
        np.testing.assert_allclose(p.grad, 18 * p.data)

    def test_grads_accumulate_across_backward_calls(self):
        p = Parameter(np.array([2.0]))
        for _ in range(2):
            with Tape() as tape:
                loss = T.reduce_sum(T.mul(p, p))
            tape.backward(loss)
        np.testing.assert_allclose(p.grad, [8.0])

    def test_shared_subexpression(self):
        p = Parameter(np.array([3.0]))
        with Tape() as tape:
            e = T.exp(p)
            loss = T.reduce_sum(T.add(e, T.mul(e, e)))
        tape.backward(loss)
        np.testing.assert_allclose(p.grad, np.exp(3.0) + 2 * np.exp(6.0))


class TestElementwiseGrads:
    @pytest.mark.parametrize("op", ["relu", "tanh", "exp", "log", "scale", "matmul", "concat", "reshape"])
    def test_finite_difference(self, op):
        rng = seeded_rng(3)
        a = Parameter(rng.uniform(0.2, 2.0, (3, 4)) * rng.choice([-1, 1], (3, 4)))
        b = Parameter(rng.normal(size=(4, 2)))
        w = Tensor(rng.normal(size=(3, 4)))

        def f():
            if op == "relu":
                y = T.relu(a)
            elif op == "tanh":
                y = T.tanh(a)
            elif op == "exp":
                y = T.exp(a)
            elif op == "log":
                y = T.log(T.mul(a, a))
            elif op == "scale":
                y = T.scale(a, Tensor([0.7]))
            elif op == "matmul":
                return T.reduce_sum(T.tanh(T.matmul(a, b)))
            elif op == "concat":
                return T.reduce_sum(T.tanh(T.concat([a, T.scale(a, 2.0)], axis=-1)))
            else:
                y = T.reshape(T.reshape(a, (4, 3)), (3, 4))
            return T.reduce_sum(T.mul(y, w))

        assert finite_diff_check(f, [a, b]) < 1e-7

    def test_log_of_non_positive(self):
        with pytest.raises(NumericError):
            T.log(Tensor([0.0, 1.0]))


class TestFiniteDiffCheck:
    def test_quadratic_exact(self):
        p = Parameter(np.array([1.0, -2.0, 0.5]))
        err = finite_diff_check(lambda: T.reduce_sum(T.mul(p, p)), [p])
        assert err < 1e-9
        np.testing.assert_allclose(p.grad, 2 * p.data)

    def test_detects_wrong_backward(self):
        p = Parameter(np.array([0.3, 0.8]))

        def broken():
            out = T.record("double", 2 * p.data, (p,), lambda g: (g,))
            return T.reduce_sum(out)

        assert finite_diff_check(broken, [p]) > 0.3

    def test_non_deterministic_f(self):
        p = Parameter(np.ones(2))
        rng = seeded_rng(0)
        with pytest.raises(ContractError):
            finite_diff_check(lambda: T.reduce_sum(T.scale(p, float(rng.normal()))), [p])

    def test_bad_step(self):
        p = Parameter(np.ones(2))
        with pytest.raises(ParameterError):
            finite_diff_check(lambda: T.reduce_sum(p), [p], h=0.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=8))
def test_tanh_grad_property(values):
    p = Parameter(np.array(values))
    with Tape() as tape:
        loss = T.reduce_sum(T.tanh(p))
    tape.backward(loss)
    np.testing.assert_allclose(p.grad, 1 - np.tanh(values) ** 2, atol=1e-12)
