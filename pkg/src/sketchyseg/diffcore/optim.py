from __future__ import annotations

import numpy as np

from .nn import ParamSet


def clip_grad_norm(params: ParamSet, max_norm: float) -> float:
    total = float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params.values())))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            p.grad *= scale
    return total


class SGD:
    def __init__(self, params: ParamSet, lr: float, clip: float | None = 1.0):
        self.params = params
        self.lr = lr
        self.clip = clip

    def step(self) -> None:
        if self.clip is not None:
            clip_grad_norm(self.params, self.clip)
        for p in self.params.values():
            p.data = p.data - self.lr * p.grad


class AdamW:
    """Adam with decoupled weight decay (decay is applied to the weights directly)."""

    def __init__(self, params: ParamSet, lr: float = 2e-4, weight_decay: float = 0.05,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 clip: float | None = None):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        if self.clip is not None:
            clip_grad_norm(self.params, self.clip)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = p.data * (1.0 - self.lr * self.weight_decay) - self.lr * update
