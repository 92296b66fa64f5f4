"""AdamW with decoupled weight decay, plus a linear learning-rate schedule."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import Parameter


class AdamW:
    """AdamW over a fixed parameter group.

    Moments live on the parameters themselves (``p.m``, ``p.v``) so a
    checkpoint of the parameters is enough to resume.
    """

    def __init__(self, params: Sequence[Parameter], lr: float = 5e-5,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = p.grad
            p.m *= self.beta1
            p.m += (1.0 - self.beta1) * g
            p.v *= self.beta2
            p.v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.values *= 1.0 - lr * self.weight_decay
            p.values -= lr * (p.m / bc1) / (np.sqrt(p.v / bc2) + self.eps)


def adamw_step(params: Sequence[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.0, step: int = 1) -> None:
    """One functional AdamW update; ``step`` is the 1-based bias-correction index."""
    opt = AdamW(params, lr, (beta1, beta2), eps, weight_decay)
    opt.t = step - 1
    opt.step()


def linear_decay(step: int, total_steps: int, base_lr: float, final_frac: float = 0.0) -> float:
    """Learning rate at ``step`` when decaying linearly from ``base_lr``."""
    if total_steps <= 0:
        return base_lr
    frac = min(max(step / total_steps, 0.0), 1.0)
    return base_lr * (1.0 - (1.0 - final_frac) * frac)
