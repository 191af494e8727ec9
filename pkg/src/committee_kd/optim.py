"""Gradient-descent optimizers over lists of named parameters.

Each optimizer owns its slot state keyed by parameter identity, so two
optimizers can drive disjoint parameter groups of the same model without
interfering. Frozen parameters are skipped entirely: no state, no update.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .tensor import Parameter


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.tensor.zero_grad()


class SGD:
    """Plain stochastic gradient descent, optionally with momentum."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-2, momentum: float = 0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity: dict[int, np.ndarray] = {}

    def step(self) -> None:
        for p in self.params:
            if p.frozen:
                continue
            g = p.grad
            if self.momentum != 0.0:
                v = self._velocity.get(id(p))
                if v is None:
                    v = np.zeros_like(p.data)
                    self._velocity[id(p)] = v
                v *= self.momentum
                v += g
                g = v
            p.data[...] -= self.lr * g


class Adam:
    """Adam with bias-corrected first/second moment estimates."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}
        self._t: dict[int, int] = {}

    def step(self) -> None:
        for p in self.params:
            if p.frozen:
                continue
            g = p.grad
            key = id(p)
            m = self._m.get(key)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
                self._m[key], self._v[key] = m, v
                self._t[key] = 0
            else:
                v = self._v[key]
            self._t[key] += 1
            t = self._t[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.data[...] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
