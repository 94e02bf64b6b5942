"""Adam and AdaDelta.

Both update parameters in place by swapping each tensor's backing array;
parameters without a gradient in the store are left untouched and their
state is not advanced.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch
from .tensor import GradStore, Tensor


@dataclass
class OptimizerState:
    """Per-parameter accumulators keyed by parameter position, plus the step count."""

    slots: dict[str, list[np.ndarray]] = field(default_factory=dict)
    step: int = 0


class Optimizer:
    slot_names: tuple[str, ...] = ()

    def __init__(self, params, lr: float):
        self.params: list[Tensor] = list(params)
        self.lr = float(lr)
        self.state = OptimizerState(
            {name: [np.zeros_like(p.data) for p in self.params] for name in self.slot_names}
        )

    def step(self, grads: GradStore) -> None:
        self.state.step += 1
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ShapeMismatch(f"gradient {g.shape} does not match parameter {p.shape}")
            p._replace(self._update(i, p.data, g.astype(p.dtype, copy=False)))

    def _update(self, i: int, theta: np.ndarray, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Adam(Optimizer):
    slot_names = ("m", "v")

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def _update(self, i, theta, g):
        b1, b2, t = self.beta1, self.beta2, self.state.step
        m = self.state.slots["m"][i] = b1 * self.state.slots["m"][i] + (1 - b1) * g
        v = self.state.slots["v"][i] = b2 * self.state.slots["v"][i] + (1 - b2) * (g * g)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class AdaDelta(Optimizer):
    """AdaDelta with ``lr`` applied as a multiplier on the native update."""

    slot_names = ("acc_grad", "acc_delta")

    def __init__(self, params, lr=0.001, rho=0.95, eps=1e-6):
        super().__init__(params, lr)
        self.rho, self.eps = rho, eps

    def _update(self, i, theta, g):
        rho, eps = self.rho, self.eps
        acc_g = self.state.slots["acc_grad"][i] = rho * self.state.slots["acc_grad"][i] + (1 - rho) * (g * g)
        acc_d = self.state.slots["acc_delta"][i]
        delta = -np.sqrt(acc_d + eps) / np.sqrt(acc_g + eps) * g
        self.state.slots["acc_delta"][i] = rho * acc_d + (1 - rho) * (delta * delta)
        return theta + self.lr * delta


def adam_step(params, grads: GradStore, optimizer: Adam) -> OptimizerState:
    if optimizer.params != list(params):
        raise ShapeMismatch("optimizer was built for different parameters")
    optimizer.step(grads)
    return optimizer.state


def adadelta_step(params, grads: GradStore, optimizer: AdaDelta) -> OptimizerState:
    if optimizer.params != list(params):
        raise ShapeMismatch("optimizer was built for different parameters")
    optimizer.step(grads)
    return optimizer.state


OPTIMIZERS = {"adam": Adam, "adadelta": AdaDelta}


def make_optimizer(name: str, params, lr: float) -> Optimizer:
    try:
        return OPTIMIZERS[name.lower()](params, lr=lr)
    except KeyError:
        raise ValueError(f"unknown optimizer {name!r}") from None
