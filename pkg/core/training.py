"""
Single optimisation step: forward, loss, backward, Adam update.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .detnet import Detector
from .errors import NumericError
from .loss import LossResult, LossWeights, compute_loss
from .optimizer import AdamState, adam_update
from .tensor import ensure_finite
from .utils import configure_logger

logger = configure_logger("training")


@dataclass
class StepResult:
    loss: LossResult
    step: int
    lr: float


def loss_and_grads(
    model: Detector,
    images: np.ndarray,
    targets: Sequence[np.ndarray],
    weights: LossWeights | None = None,
):
    """Forward and backward without touching the parameters."""
    outputs, caches = model.forward(images)
    for index, output in enumerate(outputs):
        ensure_finite(output, f"forward output {index}")
    result = compute_loss(outputs, targets, model.config, weights)
    if not np.isfinite(result.total):
        raise NumericError(f"non-finite loss {result.total}", "compute_loss")
    _, grads = model.backward(caches, result.grads)
    for name, grad in grads.items():
        ensure_finite(grad, f"gradient {name}")
    return result, grads


def train_step(
    model: Detector,
    state: AdamState,
    images: np.ndarray,
    targets: Sequence[np.ndarray],
    weights: LossWeights | None = None,
    lr: float | None = None,
) -> StepResult:
    """
    One Adam step on a batch. On a non-finite loss or gradient nothing is
    updated and NumericError propagates.
    """
    try:
        result, grads = loss_and_grads(model, images, targets, weights)
    except NumericError as exc:
        logger.error("Step %s aborted: %s", state.step + 1, exc)
        raise
    rate = state.lr if lr is None else lr
    adam_update(state, model.parameters(), grads, lr=rate)
    return StepResult(loss=result, step=state.step, lr=rate)


def evaluate_loss(
    model: Detector,
    images: np.ndarray,
    targets: Sequence[np.ndarray],
    weights: LossWeights | None = None,
) -> LossResult:
    outputs, _ = model.forward(images)
    return compute_loss(outputs, targets, model.config, weights)
