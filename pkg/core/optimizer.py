"""
Adam optimizer over named parameter tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from .tensor import Tensor

LR_FINAL_RATIO = 0.01


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"Adam betas must lie in [0, 1), got {self.beta1}, {self.beta2}")

    def copy(self) -> "AdamState":
        return AdamState(
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            step=self.step,
            m={name: value.copy() for name, value in self.m.items()},
            v={name: value.copy() for name, value in self.v.items()},
        )


def adam_update(
    state: AdamState,
    parameters: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    lr: float | None = None,
) -> None:
    """Apply one Adam step in place. Parameters without a gradient keep their moments."""
    rate = state.lr if lr is None else lr
    state.step += 1
    bias1 = 1.0 - state.beta1**state.step
    bias2 = 1.0 - state.beta2**state.step
    for name, tensor in parameters.items():
        grad = grads.get(name)
        if grad is None:
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(tensor.data)
            v = np.zeros_like(tensor.data)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.m[name] = m.astype(tensor.data.dtype, copy=False)
        state.v[name] = v.astype(tensor.data.dtype, copy=False)
        update = rate * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        tensor.data -= update.astype(tensor.data.dtype, copy=False)


def scheduled_lr(base_lr: float, schedule: str, step: int, total_steps: int) -> float:
    """
    ``constant`` keeps the base rate; ``cosine`` anneals to 1% of it over ``total_steps``.
    """
    if schedule == "constant" or total_steps <= 0:
        return base_lr
    if schedule == "cosine":
        progress = min(1.0, max(0.0, step / total_steps))
        return base_lr * (LR_FINAL_RATIO + (1.0 - LR_FINAL_RATIO) * 0.5 * (1.0 + math.cos(math.pi * progress)))
    raise ValueError(f"Unknown lr schedule {schedule!r}")
