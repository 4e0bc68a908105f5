"""SGD with momentum, coupled weight decay, global-norm clipping, and the
warmup-plus-cosine learning-rate schedule."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericError
from .tensor import Tensor


def clip_global_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the pre-clip norm. Raises NumericError on non-finite gradients so
    a diverging run fails loudly instead of training on garbage.
    """
    total = 0.0
    for p in params:
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise NumericError("non-finite gradient encountered before clipping")
        total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


class SgdMomentum:
    """Classic momentum SGD; decay is added to the gradient before the
    velocity update (coupled form):

        v <- mu * v + (g + wd * theta)
        theta <- theta - lr * v
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        momentum: float = 0.9,
        weight_decay: float = 0.0,
        clip_norm: Optional[float] = 5.0,
    ):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if not (0.0 <= momentum < 1.0):
            raise ConfigError(f"momentum must be in [0, 1), got {momentum}")
        self.params = [p for p in params if p.requires_grad]
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        """Apply one update; returns the pre-clip gradient norm."""
        norm = clip_global_norm(self.params, self.clip_norm) if self.clip_norm else _norm(self.params)
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v
        return norm


def _norm(params: Sequence[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            if not np.all(np.isfinite(p.grad)):
                raise NumericError("non-finite gradient encountered")
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


def lr_at(epoch: int, base_lr: float, total_epochs: int, warmup_epochs: int) -> float:
    """Learning rate at a 0-indexed epoch: linear ramp 0 -> base_lr over the
    warmup epochs, then half-cosine decay from base_lr down to 0 at epoch E.

    Valid on the closed range [0, E]; lr(0) is exactly 0 when warmup is on.
    The degenerate E == W case pins the post-warmup point at base_lr.
    """
    if total_epochs <= 0:
        raise ConfigError("total_epochs must be positive")
    if not (0 <= warmup_epochs <= total_epochs):
        raise ConfigError(f"warmup {warmup_epochs} outside [0, {total_epochs}]")
    if epoch < 0 or epoch > total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {total_epochs}]")
    if epoch < warmup_epochs:
        return base_lr * epoch / warmup_epochs
    if total_epochs == warmup_epochs:
        return base_lr
    progress = (epoch - warmup_epochs) / (total_epochs - warmup_epochs)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
