"""Adam/AdamW over named parameter arrays, plus the warm-restart cosine
learning-rate schedule used by the distiller."""

from __future__ import annotations

import math

import numpy as np


class Adam:
    """Updates parameter arrays in place; `decoupled` selects AdamW."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, decoupled: bool = False):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            g = g.astype(np.float32)
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.b1) * (g - m)
            v += (1.0 - self.b2) * (g * g - v)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and self.decoupled:
                update = update + self.weight_decay * p
            p -= self.lr * update


class CosineWarmRestarts:
    """Cosine annealing restarting at epoch T0, then T0*T_mult, ...

    lr(epoch) = eta_min + (base_lr - eta_min) * (1 + cos(pi*t/T_i)) / 2
    where t is the position inside the current restart cycle.
    """

    def __init__(self, base_lr: float, t0: int = 10, t_mult: int = 2,
                 eta_min: float = 0.0):
        if t0 < 1 or t_mult < 1:
            raise ValueError("t0 and t_mult must be >= 1")
        self.base_lr = base_lr
        self.t0 = t0
        self.t_mult = t_mult
        self.eta_min = eta_min

    def lr_at(self, epoch: int) -> float:
        t_i = self.t0
        t = epoch
        while t >= t_i:
            t -= t_i
            t_i *= self.t_mult
        return self.eta_min + (self.base_lr - self.eta_min) * \
            (1.0 + math.cos(math.pi * t / t_i)) / 2.0
