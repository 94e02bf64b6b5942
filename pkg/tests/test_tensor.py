import math

import numpy as np
import pytest

from ueeg import Tape, Tensor, backward, grad_check, precision
from ueeg import tensor as T
from ueeg.errors import (
    AxisOutOfRange,
    BoundsError,
    DetachedLoss,
    DomainError,
    NonFiniteInput,
    NonScalarOutput,
    NotScalarLoss,
    ShapeMismatch,
    UEEGError,
)


def grads_of(f, *xs):
    for x in xs:
        x.requires_grad = True
    with Tape() as tape:
        out = f(*xs)
    g = backward(tape, out)
    return [g[x] for x in xs]


class TestTensorValue:
    def test_default_dtype_is_float32(self):
        assert Tensor([1, 2]).dtype == np.float32

    def test_precision_context(self):
        with precision(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_data_is_read_only(self):
        t = Tensor(np.zeros(3))
        with pytest.raises(ValueError):
            t.data[0] = 1

    def test_construction_copies(self):
        a = np.ones(3, dtype=np.float32)
        t = Tensor(a)
        a[0] = 5
        assert t.data[0] == 1

    def test_reshape_is_new_value(self):
        t = Tensor([1, 2, 3, 4])
        r = t.reshape(2, 2)
        assert t.shape == (4,)
        np.testing.assert_array_equal(r.data, [[1, 2], [3, 4]])


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1, 0, 2])).data, [0, 0, 2])

    def test_sigmoid_zero(self):
        assert T.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_add(self):
        np.testing.assert_array_equal((Tensor([1, 2]) + Tensor([3, 4])).data, [4, 6])

    def test_dispatch(self):
        np.testing.assert_array_equal(T.elementwise("mul", Tensor([2, 3]), Tensor([4, 5])).data, [8, 15])
        np.testing.assert_array_equal(T.elementwise("neg", Tensor([2])).data, [-2])

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            T.elementwise("pow", Tensor([1]))

    def test_singleton_broadcast(self):
        out = Tensor(np.ones((2, 3))) + Tensor(np.arange(3))
        np.testing.assert_array_equal(out.data, [[1, 2, 3], [1, 2, 3]])
        out = Tensor(np.ones((2, 3))) + Tensor([[1], [2]])
        np.testing.assert_array_equal(out.data[:, 0], [2, 3])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            Tensor(np.ones((2, 3))) + Tensor(np.ones(2))

    def test_log_domain(self):
        with pytest.raises(DomainError):
            T.log(Tensor([1.0, 0.0]))

    def test_div_by_zero(self):
        with pytest.raises(DomainError):
            Tensor([1.0]) / Tensor([0.0])

    def test_broadcast_gradient_sums(self, f64):
        a, b = Tensor(np.ones((2, 3))), Tensor([1.0, 2.0, 3.0])
        ga, gb = grads_of(lambda a, b: (a * b).sum(), a, b)
        np.testing.assert_array_equal(ga, [[1, 2, 3], [1, 2, 3]])
        np.testing.assert_array_equal(gb, [2, 2, 2])


class TestMatmulReduce:
    def test_identity(self):
        m = [[1, 2], [3, 4]]
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)

    def test_dot(self):
        assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data[0, 0] == 11

    def test_annihilator(self):
        out = T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.arange(12).reshape(3, 4)))
        np.testing.assert_array_equal(out.data, np.zeros((2, 4)))

    def test_inner_mismatch(self):
        with pytest.raises(ShapeMismatch):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_matmul_gradient_rules(self, f64, rng):
        a, b = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(3, 4)))
        g = np.ones((2, 4))
        ga, gb = grads_of(lambda a, b: (a @ b).sum(), a, b)
        np.testing.assert_allclose(ga, g @ b.data.T)
        np.testing.assert_allclose(gb, a.data.T @ g)

    def test_sum(self):
        assert Tensor([1, 2, 3]).sum().item() == 6

    def test_mean_axis(self):
        np.testing.assert_array_equal(Tensor([[1, 3], [5, 7]]).mean(axis=0).data, [3, 5])

    def test_max_and_argmax(self):
        x = Tensor([2, 9, 4])
        assert x.max().item() == 9
        assert T.argmax(x) == 1

    def test_axis_out_of_range(self):
        with pytest.raises(AxisOutOfRange):
            Tensor([1, 2]).sum(axis=1)

    def test_max_gradient_goes_to_first_max(self, f64):
        (g,) = grads_of(lambda x: x.max(), Tensor([3.0, 1.0, 3.0]))
        np.testing.assert_array_equal(g, [1, 0, 0])


class TestShapeOps:
    def test_transpose(self):
        np.testing.assert_array_equal(Tensor([[1, 2], [3, 4]]).T.data, [[1, 3], [2, 4]])

    def test_concat(self):
        np.testing.assert_array_equal(T.concat([Tensor([1]), Tensor([2, 3])], axis=0).data, [1, 2, 3])

    def test_reshape_count(self):
        with pytest.raises(ShapeMismatch):
            Tensor([1, 2, 3]).reshape(2, 2)

    def test_slice_bounds(self):
        with pytest.raises(BoundsError):
            T.slice_(Tensor([1, 2, 3]), 0, 1, 5)

    def test_pad(self):
        np.testing.assert_array_equal(T.pad(Tensor([1, 2]), [(1, 2)]).data, [0, 1, 2, 0, 0])

    def test_round_trips_bit_exact(self, rng):
        x = Tensor(rng.normal(size=(3, 4, 5)))
        assert np.array_equal(x.reshape(12, 5).reshape(3, 4, 5).data, x.data)
        assert np.array_equal(x.transpose(2, 0, 1).transpose(1, 2, 0).data, x.data)

    def test_shape_op_gradients(self, f64, rng):
        x = Tensor(rng.normal(size=(2, 3)))
        y = Tensor(rng.normal(size=(2, 2)))

        def f(x, y):
            z = T.concat([x, y], axis=1)
            z = T.pad(z, [(1, 0), (0, 1)])
            z = T.slice_(z.transpose(1, 0), 0, 1, 5)
            return (z * z).sum()

        assert grad_check(f, [x, y]).passed

    def test_shape_ops_dispatch(self):
        assert T.shape_ops("reshape", Tensor([1, 2, 3, 4]), (2, 2)).shape == (2, 2)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(Tensor([0, 0, 0])).data, [1 / 3] * 3, rtol=1e-6)

    def test_no_overflow(self):
        np.testing.assert_array_equal(T.softmax(Tensor([1000, 1000])).data, [0.5, 0.5])

    def test_closed_form(self, f64):
        np.testing.assert_allclose(T.softmax(Tensor([0, math.log(3)])).data, [0.25, 0.75], atol=1e-15)

    def test_rows_sum_to_one_large_magnitude(self, rng):
        x = Tensor(rng.uniform(-1e3, 1e3, size=(50, 7)))
        np.testing.assert_allclose(T.softmax(x, axis=1).data.sum(axis=1), 1, atol=1e-6)

    def test_non_finite(self):
        with pytest.raises(NonFiniteInput):
            T.softmax(Tensor([0.0, np.inf]))


class TestBackward:
    def test_sum_gives_ones(self):
        (g,) = grads_of(lambda x: x.sum(), Tensor([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(g, [1, 1, 1])

    def test_square(self):
        (g,) = grads_of(lambda x: (x * x).sum(), Tensor([2.0]))
        np.testing.assert_array_equal(g, [4])

    def test_relu_gradient(self):
        (g,) = grads_of(lambda x: T.relu(x).sum(), Tensor([-1.0, 5.0]))
        np.testing.assert_array_equal(g, [0, 1])

    def test_deep_sum_graph_all_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))

        def f(x):
            y = x
            for _ in range(20):
                y = y.reshape(3, 2).transpose(1, 0).reshape(2, 3).transpose(1, 0).transpose(1, 0)
            return y.sum()

        (g,) = grads_of(f, x)
        np.testing.assert_array_equal(g, np.ones((2, 3)))

    def test_non_ancestors_absent(self):
        a = Tensor([1.0], requires_grad=True)
        b = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            _ = b * 2
            loss = (a * 3).sum()
        g = backward(tape, loss)
        assert a in g and b not in g

    def test_not_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = x * 2
        with pytest.raises(NotScalarLoss):
            backward(tape, y)

    def test_detached(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            pass
        with pytest.raises(DetachedLoss):
            backward(tape, x.sum())

    def test_no_recording_outside_tape(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            pass
        _ = x * 2
        assert tape.nodes == []

    def test_tape_topological(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        with Tape() as tape:
            y = T.tanh(x) * T.exp(x)
            _ = (y + x).sum()
        seen = {id(x)}
        for node in tape.nodes:
            for p in node.parents:
                if p.requires_grad:
                    assert id(p) in seen
            seen.add(id(node.out))

    def test_gradient_shapes_match(self, rng):
        xs = [Tensor(rng.normal(size=s)) for s in [(2, 3), (3,), (1, 3)]]
        gs = grads_of(lambda a, b, c: (a * b + c).sum(), *xs)
        assert [g.shape for g in gs] == [x.shape for x in xs]


class TestGradCheck:
    @pytest.mark.parametrize("op", ["sigmoid", "tanh", "exp", "relu", "neg"])
    @pytest.mark.parametrize("seed", range(10))
    def test_unary_ops(self, f64, op, seed):
        r = np.random.default_rng(seed)
        x = Tensor(r.normal(size=(4, 3)) + (0.1 if op == "relu" else 0))
        f = getattr(T, op)
        assert grad_check(lambda x: (f(x) * f(x)).sum(), x).max_rel_error < 1e-4

    @pytest.mark.parametrize("seed", range(10))
    def test_binary_and_reductions(self, f64, seed):
        r = np.random.default_rng(seed)
        a = Tensor(r.normal(size=(3, 4)))
        b = Tensor(r.uniform(0.5, 2.0, size=(3, 4)))
        c = Tensor(r.normal(size=(4, 2)))

        def f(a, b, c):
            y = (a - b) * a / b + T.log(b)
            return (T.matmul(y, c).max(axis=1) + y.mean(axis=1)).sum() + T.log_softmax(a, axis=1).sum()

        assert grad_check(f, [a, b, c]).max_rel_error < 1e-4

    def test_sigmoid_seed7(self, f64):
        x = Tensor(np.random.default_rng(7).normal(size=10))
        assert grad_check(lambda x: T.sigmoid(x).sum(), x).passed

    def test_matmul_sum(self, f64):
        r = np.random.default_rng(0)
        x, w = Tensor(r.normal(size=(3, 4))), Tensor(r.normal(size=(4, 2)))
        assert grad_check(lambda x, w: T.matmul(x, w).sum(), [x, w]).passed

    def test_sum_rounding_only(self, f64):
        x = Tensor(np.random.default_rng(0).normal(size=8))
        assert grad_check(lambda x: x.sum(), x).max_rel_error < 1e-9

    def test_catches_wrong_gradient(self, f64):
        def bad(a):
            return T.record(a.data * 2, (a,), lambda g: (g * 3,), "bad")

        x = Tensor([1.0, 2.0])
        assert not grad_check(lambda x: bad(x).sum(), x).passed

    def test_non_scalar(self, f64):
        with pytest.raises(NonScalarOutput):
            grad_check(lambda x: x * 2, Tensor([1.0, 2.0]))

    def test_needs_float64(self):
        with pytest.raises(UEEGError):
            grad_check(lambda x: x.sum(), Tensor([1.0]))

    def test_kink_filter_keeps_smooth_errors(self, f64):
        def bad(a):
            return T.record(a.data * 2, (a,), lambda g: (g * 3,), "bad")

        x = Tensor([1.0, 2.0])
        assert not grad_check(lambda x: bad(x).sum(), x, skip_kinks=True).passed

    def test_kink_filter_skips_straddled_relu(self, f64):
        x = Tensor([1e-6, 1.0])
        plain = grad_check(lambda x: T.relu(x).sum(), x)
        filtered = grad_check(lambda x: T.relu(x).sum(), x, skip_kinks=True)
        assert not plain.passed
        assert filtered.passed and filtered.skipped == 1
