"""Optimizers operating on lists of tensors, plus the cosine decay schedule."""

from __future__ import annotations

import math
from typing import Iterable, List

import numpy as np

from .tensor import Tensor

__all__ = ["SGDMomentum", "Adam", "cosine_lr"]


def cosine_lr(lr0: float, epoch: int, total_epochs: int) -> float:
    """Cosine decay from lr0 at epoch 0 to 0 at epoch == total_epochs."""
    if total_epochs <= 0:
        raise ValueError("total_epochs must be positive")
    e = min(max(epoch, 0), total_epochs)
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * e / total_epochs))


class SGDMomentum:
    """SGD with classical momentum and coupled L2 weight decay.

    v <- momentum * v + grad + wd * p;  p <- p - lr * v
    """

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params: List[Tensor] = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class Adam:
    """Adam with bias correction; weight decay is coupled (added to the gradient)."""

    def __init__(self, params: Iterable[Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params: List[Tensor] = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def step(self):
        self._t += 1
        b1t = 1.0 - self.beta1 ** self._t
        b2t = 1.0 - self.beta2 ** self._t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / b1t
            vhat = v / b2t
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
