"""First-order adaptive-moment optimizer used by both training loops."""

from __future__ import annotations

import numpy as np

from .numerics import Tensor


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> None:
        """Replace each named Tensor with its updated value (params stay immutable)."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for name, g in grads.items():
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(g)
                self._v[name] = np.zeros_like(g)
            v = self._v[name]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self._m[name] = m
            self._v[name] = v
            update = (self.lr / corr1) * m / (np.sqrt(v / corr2) + self.eps)
            params[name] = Tensor(params[name].data - update)
