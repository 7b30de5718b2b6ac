"""AdamW with decoupled weight decay over a ParamStore."""

from __future__ import annotations

import numpy as np

from .autodiff import ParamStore


class AdamW:
    def __init__(self, params: ParamStore, lr: float, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.weight_decay, self.eps = lr, weight_decay, eps
        self.beta1, self.beta2 = betas
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.lr == 0:
                continue
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(p.data.dtype, copy=False)

    def state_dict(self) -> dict:
        return {"t": self.t}
