"""ADAM and plain SGD over named parameter sets."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import OptimizerError
from .tensor import Tensor

DEFAULT_LR = 0.0005


@dataclass
class AdamState:
    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _check_grads(params: Mapping[str, Tensor]):
    for name, p in params.items():
        if p.grad is None:
            raise OptimizerError(f"parameter {name!r} has no gradient")


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> None:
    """One bias-corrected ADAM update in place; clears the gradients."""
    _check_grads(params)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None


def sgd_step(params: Mapping[str, Tensor], lr: float) -> None:
    _check_grads(params)
    for p in params.values():
        p.data -= lr * p.grad
        p.grad = None


class Adam:
    def __init__(self, params: Mapping[str, Tensor], lr: float = DEFAULT_LR, **kw):
        self.params = dict(params)
        self.state = AdamState(lr=lr, **kw)

    def step(self):
        adam_step(self.params, self.state)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


class SGD:
    def __init__(self, params: Mapping[str, Tensor], lr: float):
        self.params = dict(params)
        self.lr = lr
        self.state = None

    def step(self):
        sgd_step(self.params, self.lr)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
