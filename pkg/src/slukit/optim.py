"""In-place SGD and Adam over named parameter tensors.

Gradients accumulate into ``Tensor.grad`` across any number of backward
passes (one tape per utterance); ``step()`` applies the update and zeroes
the grads so the next batch starts clean. Adam keeps its moment estimates
across calls.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor

__all__ = ["OptimError", "SGD", "Adam"]


class OptimError(RuntimeError):
    pass


def _normalize(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, dict):
        return list(params.items())
    return [(f"param{i}", p) for i, p in enumerate(params)]


class SGD:
    def __init__(self, params, lr: float):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.lr = lr
        self.params = _normalize(params)
        for _, p in self.params:
            p.zero_grad()

    def step(self):
        for name, p in self.params:
            if p.grad is None:
                raise OptimError(f"parameter {name!r} has no gradient")
            p.data -= self.lr * p.grad
            p.grad[...] = 0.0


class Adam:
    """Adam with bias correction; defaults beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.params = _normalize(params)
        self._m = [np.zeros_like(p.data) for _, p in self.params]
        self._v = [np.zeros_like(p.data) for _, p in self.params]
        for _, p in self.params:
            p.zero_grad()

    def step(self):
        for name, p in self.params:
            if p.grad is None:
                raise OptimError(f"parameter {name!r} has no gradient")
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for (name, p), m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            g[...] = 0.0
