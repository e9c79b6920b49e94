"""SGD with momentum, L2 weight decay, and a single midpoint step decay.

The update is the classic coupled form: weight decay is added to the raw
gradient before the momentum buffer,

    v <- momentum * v + (g + weight_decay * w)
    w <- w - lr(iteration) * group_multiplier * v

and the learning rate drops by decay_factor (default 0.1) once, at
iteration total_iterations // 2. Parameter groups carry per-group
multipliers so the head can train 10x faster than the trunk.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import UsageError, ValidationError

__all__ = ["SgdOptimizer"]


class SgdOptimizer:
    def __init__(
        self,
        groups: dict[str, list[Tensor]],
        lr: float,
        total_iterations: int,
        momentum: float = 0.9,
        weight_decay: float = 0.0,
        decay_factor: float = 0.1,
        group_multipliers: dict[str, float] | None = None,
    ):
        if lr <= 0:
            raise ValidationError(f"lr must be positive, got {lr}")
        if total_iterations < 0:
            raise ValidationError(f"total_iterations must be >= 0, got {total_iterations}")
        if not 0.0 <= momentum < 1.0:
            raise ValidationError(f"momentum must be in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise ValidationError(f"weight_decay must be >= 0, got {weight_decay}")
        self.groups = {name: list(tensors) for name, tensors in groups.items()}
        self.lr = float(lr)
        self.total_iterations = int(total_iterations)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.decay_factor = float(decay_factor)
        self.multipliers = {name: 1.0 for name in self.groups}
        if group_multipliers:
            for name, mult in group_multipliers.items():
                if name not in self.groups:
                    raise ValidationError(f"unknown parameter group {name!r}")
                self.multipliers[name] = float(mult)
        self.iteration = 0
        self._buffers = {
            name: [np.zeros_like(t.data) for t in tensors] for name, tensors in self.groups.items()
        }

    def lr_at(self, iteration: int, group: str | None = None) -> float:
        """Effective learning rate at an iteration, including the group multiplier."""
        if iteration < 0 or iteration > self.total_iterations:
            raise ValidationError(
                f"iteration must be in [0, {self.total_iterations}], got {iteration}"
            )
        base = self.lr
        if self.total_iterations > 0 and iteration >= self.total_iterations // 2:
            base *= self.decay_factor
        if group is None:
            return base
        if group not in self.multipliers:
            raise ValidationError(f"unknown parameter group {group!r}")
        return base * self.multipliers[group]

    def step(self) -> None:
        """Apply one update from the gradients currently on the parameters.

        Gradients are left in place; the training loop is responsible for
        reset_grads, which keeps the no-silent-accumulation contract of
        backward() intact.
        """
        for name, tensors in self.groups.items():
            lr = self.lr_at(self.iteration, name)
            buffers = self._buffers[name]
            for t, v in zip(tensors, buffers):
                if t.grad is None:
                    raise UsageError(f"parameter in group {name!r} has no gradient; run backward first")
                g = t.grad
                if self.weight_decay != 0.0:
                    g = g + self.weight_decay * t.data
                v *= self.momentum
                v += g
                t.data = t.data - lr * v
        self.iteration += 1
