"""Adam with linear warm-up followed by inverse square-root decay."""

from __future__ import annotations

import math
from typing import Mapping, Tuple

import numpy as np

from .autograd.tensor import Tensor


def warmup_inv_sqrt(step: int, peak_lr: float, warmup: int) -> float:
    """Learning rate for 1-based ``step``: linear ramp to ``peak_lr`` then peak * sqrt(warmup / step)."""
    if step < 1:
        return 0.0
    if warmup <= 0:
        return peak_lr
    if step <= warmup:
        return peak_lr * step / warmup
    return peak_lr * math.sqrt(warmup / step)


def global_grad_norm(params: Mapping[str, Tensor]) -> float:
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float(np.dot(t.grad.ravel(), t.grad.ravel()))
    return math.sqrt(total)


class Adam:
    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, betas: Tuple[float, float] = (0.9, 0.98),
                 eps: float = 1e-9, warmup: int = 0, clip_norm: float = 0.0):
        self.params = params
        self.peak_lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.warmup = warmup
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def current_lr(self) -> float:
        return warmup_inv_sqrt(self.step_count + 1, self.peak_lr, self.warmup)

    def step(self) -> dict:
        """Apply one update from the accumulated grads; returns grad norm and lr used."""
        norm = global_grad_norm(self.params)
        scale = 1.0
        if self.clip_norm > 0 and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.step_count += 1
        lr = warmup_inv_sqrt(self.step_count, self.peak_lr, self.warmup)
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for k, t in self.params.items():
            if t.grad is None:
                continue
            g = t.grad * scale
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            t.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return {"grad_norm": norm, "lr": lr}
