"""SGD with momentum and the half-cosine learning-rate schedule."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor


class SGD:
    """Classic momentum SGD; L2 weight decay is folded into the gradient.

    Per step: ``g = grad + wd * p``, ``v = momentum * v + g``, ``p -= lr * v``.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 0.004, momentum: float = 0.9,
                 weight_decay: float = 1e-4):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: list[np.ndarray | None] = [None] * len(self.params)

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v = self._velocity[i]
            if v is None or not self.momentum:
                v = np.array(g, copy=True)
            else:
                v = self.momentum * v + g
            self._velocity[i] = v
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def velocity(self, i: int) -> np.ndarray | None:
        return self._velocity[i]


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], velocities: list,
             lr: float = 0.004, momentum: float = 0.9, weight_decay: float = 1e-4) -> None:
    """Functional form of :class:`SGD` over explicit gradient and velocity lists."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    for i, (p, grad) in enumerate(zip(params, grads)):
        g = grad + weight_decay * p.data
        velocities[i] = g.copy() if velocities[i] is None else momentum * velocities[i] + g
        p.data -= lr * velocities[i]


def cosine_lr(base_lr: float, epoch: float, total_epochs: int) -> float:
    """Half-cosine decay from ``base_lr`` at epoch 0 to 0 at ``total_epochs``."""
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))
