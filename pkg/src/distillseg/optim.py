"""Adam optimizer over Tensor parameters."""
from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Tensor


class Adam:
    """Adam with bias correction; one (m, v) moment pair per parameter.

    Parameters with a ``None`` grad are left untouched by :meth:`step`.
    """

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 3e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ValueError(f"betas must lie in [0, 1), got ({beta1}, {beta2})")
        if eps <= 0:
            raise ValueError(f"eps must be positive, got {eps}")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1 = np.float32(self.beta1)
        b2 = np.float32(self.beta2)
        c1 = np.float32(1.0 - self.beta1**self.t)
        c2 = np.float32(1.0 - self.beta2**self.t)
        lr = np.float32(self.lr)
        eps = np.float32(self.eps)
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (np.float32(1.0) - b1) * g
            v *= b2
            v += (np.float32(1.0) - b2) * (g * g)
            m_hat = m / c1
            v_hat = v / c2
            p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
