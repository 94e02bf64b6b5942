import math

import numpy as np
import pytest

from ueeg import Tape, Tensor, backward, grad_check
from ueeg.errors import LabelOutOfRange, ShapeMismatch
from ueeg.losses import binary_cross_entropy, categorical_cross_entropy, one_hot
from ueeg.optim import AdaDelta, Adam, adadelta_step, adam_step, make_optimizer
from ueeg.tensor import GradStore


def store(pairs):
    g = GradStore()
    for t, arr in pairs:
        g._accumulate(t, np.asarray(arr, dtype=t.dtype))
    return g


class TestAdam:
    def test_zero_gradient_first_step(self, f64):
        p = Tensor([1.5, -2.0], requires_grad=True)
        opt = Adam([p])
        adam_step([p], store([(p, [0.0, 0.0])]), opt)
        np.testing.assert_array_equal(p.data, [1.5, -2.0])

    def test_first_step_value(self, f64):
        p = Tensor([0.0], requires_grad=True)
        opt = Adam([p], lr=0.001)
        opt.step(store([(p, [1.0])]))
        # bias-corrected moments are both 1, so the step is lr / (1 + eps)
        assert p.data[0] == pytest.approx(-0.001 / (1 + 1e-8), abs=1e-18)
        assert p.data[0] == pytest.approx(-0.00099999999, abs=1e-15)

    def test_two_constant_steps(self, f64):
        p = Tensor([0.0], requires_grad=True)
        opt = Adam([p], lr=0.001)
        prev = 0.0
        for _ in range(2):
            opt.step(store([(p, [1.0])]))
            assert 0.0009 <= abs(p.data[0] - prev) <= 0.001
            prev = p.data[0]
        assert opt.state.step == 2

    def test_state_shapes_mirror_params(self):
        ps = [Tensor(np.ones((2, 3)), requires_grad=True), Tensor(np.ones(4), requires_grad=True)]
        opt = Adam(ps)
        assert [m.shape for m in opt.state.slots["m"]] == [(2, 3), (4,)]

    def test_shape_mismatch(self):
        p = Tensor(np.ones(3), requires_grad=True)
        g = GradStore()
        g._accumulate(p, np.ones(2, dtype=np.float32))
        with pytest.raises(ShapeMismatch):
            Adam([p]).step(g)

    def test_missing_gradient_leaves_param(self):
        a, b = Tensor([1.0], requires_grad=True), Tensor([2.0], requires_grad=True)
        opt = Adam([a, b])
        opt.step(store([(a, [1.0])]))
        assert b.data[0] == 2.0 and a.data[0] != 1.0


class TestAdaDelta:
    def test_zero_gradient(self, f64):
        p = Tensor([0.3], requires_grad=True)
        opt = AdaDelta([p])
        for _ in range(5):
            adadelta_step([p], store([(p, [0.0])]), opt)
        assert p.data[0] == 0.3

    def test_first_step_value(self, f64):
        p = Tensor([0.0], requires_grad=True)
        opt = AdaDelta([p], lr=0.001)
        opt.step(store([(p, [1.0])]))
        delta = -math.sqrt(1e-6) / math.sqrt(0.05 + 1e-6)
        assert delta == pytest.approx(-0.0044721, abs=1e-7)
        assert p.data[0] == pytest.approx(0.001 * delta, rel=1e-12)

    def test_linear_in_lr(self, f64):
        out = []
        for lr in (0.001, 0.002):
            p = Tensor([0.0], requires_grad=True)
            AdaDelta([p], lr=lr).step(store([(p, [0.7])]))
            out.append(p.data[0])
        assert out[1] == 2 * out[0]

    def test_accumulators(self, f64):
        p = Tensor([0.0], requires_grad=True)
        opt = AdaDelta([p], lr=1.0)
        opt.step(store([(p, [2.0])]))
        assert opt.state.slots["acc_grad"][0][0] == pytest.approx(0.05 * 4)
        assert opt.state.slots["acc_delta"][0][0] == pytest.approx(0.05 * p.data[0] ** 2)


class TestFixedPoint:
    @pytest.mark.parametrize("name", ["adam", "adadelta"])
    def test_epoch_of_zero_gradients(self, name, rng):
        ps = [Tensor(rng.normal(size=(3, 2)), requires_grad=True), Tensor(rng.normal(size=5), requires_grad=True)]
        before = [p.data.copy() for p in ps]
        opt = make_optimizer(name, ps, 0.001)
        for _ in range(20):
            opt.step(store([(p, np.zeros(p.shape)) for p in ps]))
        for p, b in zip(ps, before):
            assert np.array_equal(p.data, b)

    def test_unknown(self):
        with pytest.raises(ValueError):
            make_optimizer("sgd", [], 0.1)


class TestCategoricalCE:
    def test_uniform_logits(self, f64):
        loss = categorical_cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3])
        assert loss.item() == pytest.approx(math.log(4), abs=1e-15)

    def test_confident_correct(self, f64):
        assert categorical_cross_entropy(Tensor([[20.0, -20.0]]), [0]).item() < 1e-8

    def test_closed_form(self, f64):
        loss = categorical_cross_entropy(Tensor([[0.0, math.log(3)]]), [0])
        assert loss.item() == pytest.approx(math.log(4), abs=1e-15)

    def test_one_hot_equals_int_labels(self, rng):
        logits = Tensor(rng.normal(size=(5, 3)))
        y = np.array([0, 2, 1, 1, 0])
        assert categorical_cross_entropy(logits, y).item() == categorical_cross_entropy(logits, one_hot(y, 3)).item()

    def test_bad_labels(self):
        with pytest.raises(LabelOutOfRange):
            categorical_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
        with pytest.raises(LabelOutOfRange):
            categorical_cross_entropy(Tensor(np.zeros((1, 2))), np.array([[1.0, 1.0]]))

    def test_nonnegative_and_stable(self, rng):
        logits = Tensor(rng.normal(scale=300, size=(20, 5)))
        loss = categorical_cross_entropy(logits, rng.integers(0, 5, 20)).item()
        assert np.isfinite(loss) and loss >= 0

    @pytest.mark.parametrize("seed", range(10))
    def test_gradient(self, f64, seed):
        r = np.random.default_rng(seed)
        y = r.integers(0, 4, 6)
        assert grad_check(lambda z: categorical_cross_entropy(z, y), Tensor(r.normal(size=(6, 4)))).passed

    def test_descends_along_negative_gradient(self, f64, rng):
        z = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
        y = rng.integers(0, 4, 6)
        with Tape() as tape:
            loss = categorical_cross_entropy(z, y)
        g = backward(tape, loss)[z]
        prev = loss.item()
        for step in (1e-4, 1e-3, 1e-2):
            assert categorical_cross_entropy(Tensor(z.data - step * g), y).item() < prev


class TestBinaryCE:
    def test_half(self, f64):
        assert binary_cross_entropy(Tensor(np.full((2, 3), 0.5)), np.full((2, 3), 0.5)).item() == pytest.approx(
            math.log(2), abs=1e-15)

    def test_clamp_floor(self, f64):
        t = np.array([0.0, 1.0, 1.0, 0.0])
        loss = binary_cross_entropy(Tensor(t), t).item()
        assert 0 < loss <= -math.log(1 - 1e-7)

    def test_hand_value(self, f64):
        assert binary_cross_entropy(Tensor([0.75]), [1.0]).item() == pytest.approx(-math.log(0.75), abs=1e-15)
        assert -math.log(0.75) == pytest.approx(0.2877, abs=1e-4)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            binary_cross_entropy(Tensor([0.5, 0.5]), [1.0])

    @pytest.mark.parametrize("seed", range(10))
    def test_gradient(self, f64, seed):
        r = np.random.default_rng(seed)
        t = r.uniform(size=(3, 4))
        assert grad_check(lambda p: binary_cross_entropy(p, t), Tensor(r.uniform(0.05, 0.95, size=(3, 4)))).passed
