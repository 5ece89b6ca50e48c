"""SGD with classic momentum, coupled weight decay, optional l1 penalty,
and the milestone learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class LrSchedule:
    """Piecewise-constant schedule: lr(e) = base_lr * drop_factor^(#milestones <= e)."""

    base_lr: float
    milestones: list[int] = field(default_factory=list)
    drop_factor: float = 0.1

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 < self.drop_factor < 1:
            raise ValueError("drop_factor must be in (0, 1)")
        if list(self.milestones) != sorted(self.milestones):
            raise ValueError("milestones must be ascending")


def lr_at_epoch(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    drops = sum(1 for m in schedule.milestones if m <= epoch)
    return schedule.base_lr * schedule.drop_factor ** drops


class SgdState:
    """Per-parameter momentum buffers plus the fixed optimizer hyperparameters."""

    def __init__(self, params: dict, momentum: float = 0.0, weight_decay: float = 0.0,
                 l1_penalty: float = 0.0):
        if not 0 <= momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if weight_decay < 0 or l1_penalty < 0:
            raise ValueError("penalty weights must be nonnegative")
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.l1_penalty = l1_penalty
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}


def masked_sgd_step(params: dict, masks: dict, state: SgdState, lr: float) -> None:
    """One update: g' = (g + wd*w + l1*sign(w)) * mask; v = mu*v + g'; w -= lr*v.

    `params` maps name -> Tensor with a populated grad; `masks` maps a subset
    of names to binary arrays. Weights under a zero mask stay exactly 0.0.
    """
    if lr < 0:
        raise ValueError("lr must be >= 0")
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        if state.l1_penalty:
            g = g + state.l1_penalty * np.sign(p.data)
        mask = masks.get(name)
        if mask is not None:
            g = g * mask
        v = state.velocity[name]
        v *= state.momentum
        v += g
        p.data -= lr * v
        if mask is not None:
            p.data *= mask  # keep masked entries bitwise zero


def zero_grads(params: dict) -> None:
    for p in params.values():
        p.grad = None
