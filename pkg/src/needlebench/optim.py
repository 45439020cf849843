"""AdamW with decoupled weight decay plus the two LR schedules used here."""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .tensor import ConfigError, Parameter


class AdamW:
    """Decoupled-weight-decay Adam over a fixed parameter list.

    Decay multiplies each parameter by (1 - lr * weight_decay) before the
    moment update is applied, so a zero gradient with zero decay leaves
    parameters untouched.
    """

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        if lr <= 0.0:
            raise ConfigError(f"lr must be positive, got {lr}")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {betas}")
        if weight_decay < 0.0:
            raise ConfigError(f"weight_decay must be >= 0, got {weight_decay}")
        self.params = [p for p in params if p.trainable]
        self.lr = float(lr)
        self.betas = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if self.weight_decay != 0.0:
                p.data *= (1.0 - self.lr * self.weight_decay)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def step_drop_lr(base_lr: float, epoch: int, drop_epoch: int,
                 factor: float = 0.1) -> float:
    """base_lr until drop_epoch, then base_lr * factor."""
    if base_lr <= 0.0:
        raise ConfigError(f"base_lr must be positive, got {base_lr}")
    return base_lr * factor if epoch >= drop_epoch else base_lr


def cosine_lr(base_lr: float, step: int, total_steps: int,
              min_lr: float = 0.0) -> float:
    """Cosine annealing: base_lr at step 0, min_lr at total_steps."""
    if base_lr <= 0.0:
        raise ConfigError(f"base_lr must be positive, got {base_lr}")
    if total_steps <= 0:
        raise ConfigError(f"total_steps must be positive, got {total_steps}")
    step = min(max(step, 0), total_steps)
    cos = 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
    return min_lr + (base_lr - min_lr) * cos
