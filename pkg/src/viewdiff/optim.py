"""Adam optimizer over a ParamStore (L2 weight decay added to the gradient)."""

from __future__ import annotations

import numpy as np

from . import kernels
from .autodiff import ParamStore


class Adam:
    def __init__(self, store: ParamStore, lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {n: np.zeros(p.data.size) for n, p in store.items()}
        self._v = {n: np.zeros(p.data.size) for n, p in store.items()}

    def zero_grad(self) -> None:
        self.store.zero_grad()

    def step(self) -> None:
        self.t += 1
        for name, p in self.store.items():
            if p.grad is None:
                continue
            flat = p.data.reshape(-1)
            kernels.adam_step(flat, np.ascontiguousarray(p.grad.reshape(-1)),
                              self._m[name], self._v[name], self.t, self.lr,
                              self.beta1, self.beta2, self.eps, self.weight_decay)
