"""Adaptive moment estimation over tape gradients."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ContractError
from .numerics import GradMap, Tensor

DEFAULT_LR = 3.5e-4


class Adam:
    """Standard Adam with bias correction; no weight decay.

    Parameters the backward sweep never reached read back as zero from
    the gradient map, so every registered tensor is stepped uniformly.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = DEFAULT_LR,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        if lr < 0:
            raise ContractError(f"learning rate must be >= 0, got {lr}")
        self.params = list(params)
        if len({id(p) for p in self.params}) != len(self.params):
            raise ContractError("duplicate parameter registered with Adam")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: GradMap) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = grads.get(p)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data -= (self.lr * update).astype(p.dtype, copy=False)
