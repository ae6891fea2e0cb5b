"""AdamW with decoupled weight decay, plus the warmup-cosine LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ConfigError
from .tensor import Tensor

__all__ = ["AdamWState", "adamw_step", "cosine_schedule", "zero_grads"]


@dataclass
class AdamWState:
    """First/second moment estimates per parameter and the shared step count."""

    step: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def slot(self, name: str, shape: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.moments:
            self.moments[name] = (np.zeros(shape), np.zeros(shape))
        return self.moments[name]


def adamw_step(
    params: dict[str, Tensor],
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """Apply one AdamW update in place to every parameter holding a gradient.

    Decay is decoupled: the update is lr * (m_hat / (sqrt(v_hat) + eps)
    + weight_decay * p).  Parameters without a gradient are skipped and do
    not advance their moments.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be > 0, got {lr}")
    b1, b2 = betas
    if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
        raise ConfigError(f"betas must lie in [0, 1), got {betas}")
    state.step += 1
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name in sorted(params):
        p = params[name]
        if not p.requires_grad or p.grad is None:
            continue
        m, v = state.slot(name, p.data.shape)
        if not p.data.flags["C_CONTIGUOUS"]:
            # reshape(-1) must stay a view for the in-place update to land
            p.data = np.ascontiguousarray(p.data)
        grad = np.ascontiguousarray(p.grad, dtype=np.float64)
        _kernels.adamw_update(
            p.data.reshape(-1),
            grad.reshape(-1),
            m.reshape(-1),
            v.reshape(-1),
            lr,
            b1,
            b2,
            eps,
            weight_decay,
            bc1,
            bc2,
        )


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def cosine_schedule(step: int, warmup_steps: int, total_steps: int, peak_lr: float) -> float:
    """Linear ramp from 0.1*peak to peak, then cosine decay back to 0.1*peak.

    ``step`` counts from 0; the ramp ends exactly at ``warmup_steps`` and the
    floor is reached exactly at ``total_steps``.
    """
    if total_steps < 1:
        raise ConfigError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= warmup_steps <= total_steps:
        raise ConfigError(f"warmup_steps {warmup_steps} outside [0, {total_steps}]")
    if peak_lr <= 0:
        raise ConfigError(f"peak_lr must be > 0, got {peak_lr}")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    floor = 0.1 * peak_lr
    if step < warmup_steps:
        return floor + (peak_lr - floor) * (step / warmup_steps)
    if total_steps == warmup_steps:
        return peak_lr if step == warmup_steps else floor
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return floor + (peak_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))
