"""
The default finite-difference matrix: every primitive, the composite blocks,
the loss and a reduced detector, all in double precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Tuple

import numpy as np

from config.settings import ModelConfig

from .detnet import Detector
from .dyhead import DyHeadBlock
from .gradcheck import GradcheckReport, gradcheck, tensors_of
from .layers import ConvBlock, Layer
from .loss import LossWeights, compute_loss
from .msfa import MsfaBlock
from .tensor import (
    ACTIVATIONS,
    avg_pool,
    avg_pool_backward,
    bilinear_sample,
    bilinear_sample_backward,
    global_avg_pool,
    global_avg_pool_backward,
    layer_norm,
    layer_norm_backward,
    precision,
    upsample_nearest,
    upsample_nearest_backward,
)

PRIMITIVE_TOLERANCE = 1e-4
COMPOSITE_TOLERANCE = 1e-3


@dataclass
class GradcheckCase:
    label: str
    shape: Tuple[int, ...]
    report: GradcheckReport


def _layer_check(label: str, layer: Layer, x: np.ndarray, tolerance: float, seed: int, max_entries: int = 24):
    def forward() -> np.ndarray:
        return layer.forward(x)[0]

    def backward(projection: np.ndarray) -> Dict[str, np.ndarray]:
        _, cache = layer.forward(x)
        grad_x, grads = layer.backward(cache, projection)
        return {"input": grad_x, **grads}

    tensors = {"input": x, **tensors_of(layer.parameters())}
    return gradcheck(label, forward, backward, tensors, tolerance=tolerance, seed=seed, max_entries=max_entries)


def _unary_check(
    label: str,
    op: Callable[[np.ndarray], np.ndarray],
    op_backward: Callable[[np.ndarray, np.ndarray], np.ndarray],
    x: np.ndarray,
    seed: int,
):
    return gradcheck(
        label,
        lambda: op(x),
        lambda projection: {"input": op_backward(x, projection)},
        {"input": x},
        tolerance=PRIMITIVE_TOLERANCE,
        seed=seed,
    )


def _jitter(parameters: Mapping[str, object], rng: np.random.Generator, scale: float = 0.1) -> None:
    for tensor in parameters.values():
        tensor.data += scale * rng.standard_normal(tensor.data.shape)


def _primitive_cases(rng: np.random.Generator, seed: int) -> List[GradcheckCase]:
    cases: List[GradcheckCase] = []
    x = rng.standard_normal((2, 3, 9, 9))
    for stride, dilation in ((1, 1), (2, 1), (1, 3)):
        block = ConvBlock.create(3, 4, 3, rng, stride=stride, dilation=dilation, activation="identity")
        label = f"conv2d[s{stride},d{dilation}]"
        cases.append(GradcheckCase(label, x.shape, _layer_check(label, block, x, PRIMITIVE_TOLERANCE, seed)))

    for name in sorted(ACTIVATIONS):
        act, act_backward = ACTIVATIONS[name]
        sample = rng.uniform(-2.5, 2.5, size=(2, 3, 4, 4))
        cases.append(GradcheckCase(name, sample.shape, _unary_check(name, act, act_backward, sample, seed)))

    hidden = rng.standard_normal((3, 6, 1, 1))
    cases.append(GradcheckCase("layer_norm", hidden.shape, _unary_check("layer_norm", layer_norm, layer_norm_backward, hidden, seed)))

    grid = rng.standard_normal((2, 3, 8, 8))
    cases.append(
        GradcheckCase(
            "global_avg_pool",
            grid.shape,
            _unary_check("global_avg_pool", global_avg_pool, lambda a, g: global_avg_pool_backward(a.shape, g), grid, seed),
        )
    )
    cases.append(
        GradcheckCase(
            "avg_pool",
            grid.shape,
            _unary_check("avg_pool", lambda a: avg_pool(a, 2), lambda a, g: avg_pool_backward(g, 2), grid, seed),
        )
    )
    cases.append(
        GradcheckCase(
            "upsample_nearest",
            grid.shape,
            _unary_check(
                "upsample_nearest", lambda a: upsample_nearest(a, 2), lambda a, g: upsample_nearest_backward(g, 2), grid, seed
            ),
        )
    )

    source = rng.standard_normal((2, 3, 6, 7))
    ys = rng.uniform(-0.8, 5.8, size=(2, 5, 4))
    xs = rng.uniform(-0.8, 6.8, size=(2, 5, 4))

    def sample_backward(projection: np.ndarray) -> Dict[str, np.ndarray]:
        g_in, g_y, g_x = bilinear_sample_backward(source, ys, xs, projection)
        return {"input": g_in, "ys": g_y, "xs": g_x}

    cases.append(
        GradcheckCase(
            "bilinear_sample",
            source.shape,
            gradcheck(
                "bilinear_sample",
                lambda: bilinear_sample(source, ys, xs),
                sample_backward,
                {"input": source, "ys": ys, "xs": xs},
                tolerance=PRIMITIVE_TOLERANCE,
                seed=seed,
            ),
        )
    )
    return cases


def _composite_cases(rng: np.random.Generator, seed: int) -> List[GradcheckCase]:
    cases: List[GradcheckCase] = []
    x = rng.standard_normal((2, 4, 12, 12))
    msfa = MsfaBlock.create(4, 6, rng, mid_channels=3)
    cases.append(GradcheckCase("msfa", x.shape, _layer_check("msfa", msfa, x, COMPOSITE_TOLERANCE, seed)))

    view = rng.standard_normal((2, 2, 4, 6, 6))
    block = DyHeadBlock.create(4, rng, points=9, reduction=2)
    # move the sampling points off the integer lattice, where bilinear weights have kinks
    _jitter(block.offset_conv.parameters(), rng, 0.2)
    params = block.parameters()
    for label, forward, backward, prefixes in (
        ("dyhead.scale", block.scale_forward, block.scale_backward, ("scale_fc",)),
        ("dyhead.spatial", block.spatial_forward, block.spatial_backward, ("offset_conv", "spatial_weights")),
        ("dyhead.task", block.task_forward, block.task_backward, ("theta_fc1", "theta_fc2")),
        ("dyhead.block", block.forward, block.backward, ("",)),
    ):
        owned = {name: t for name, t in params.items() if name.startswith(prefixes)}
        stage = _BoundStage(forward, backward, owned)
        cases.append(GradcheckCase(label, view.shape, _layer_check(label, stage, view, COMPOSITE_TOLERANCE, seed)))
    return cases


class _BoundStage:
    """One attention stage of a block, seen as a layer owning a subset of its parameters."""

    def __init__(self, forward, backward, owned) -> None:
        self.forward = forward
        self.backward = backward
        self.owned = owned

    def parameters(self):
        return self.owned


def reduced_model_config(dyhead_blocks: int = 1) -> ModelConfig:
    return ModelConfig(width=0.125, depth=1, dyhead_blocks=dyhead_blocks, dyhead_reduction=2, input_size=64)


def _loss_case(rng: np.random.Generator, seed: int) -> GradcheckCase:
    config = reduced_model_config()
    channels = config.anchors_per_scale * config.outputs_per_anchor
    predictions = [0.5 * rng.standard_normal((2, channels, 8, 8)), 0.5 * rng.standard_normal((2, channels, 4, 4))]
    targets = [
        np.array([[0, 0.31, 0.42, 0.08, 0.1], [0, 0.7, 0.2, 0.12, 0.09]]),
        np.array([[0, 0.55, 0.61, 0.2, 0.18]]),
    ]
    # the soft objectness label is detached, so finite differences need hard labels
    weights = LossWeights(iou_ratio=0.0)

    def forward() -> np.ndarray:
        return np.array([compute_loss(predictions, targets, config, weights).total])

    def backward(projection: np.ndarray) -> Dict[str, np.ndarray]:
        grads = compute_loss(predictions, targets, config, weights).grads
        return {f"map.s{stride}": g.reshape(p.shape) * projection[0] for stride, g, p in zip(config.strides, grads, predictions)}

    tensors = {f"map.s{stride}": p for stride, p in zip(config.strides, predictions)}
    report = gradcheck("loss", forward, backward, tensors, tolerance=COMPOSITE_TOLERANCE, seed=seed)
    return GradcheckCase("loss", predictions[0].shape, report)


def _model_case(rng: np.random.Generator, seed: int, max_entries: int) -> GradcheckCase:
    model = Detector(reduced_model_config(), seed=seed)
    _jitter({k: v for k, v in model.parameters().items() if "offset_conv" in k}, rng, 0.2)
    x = rng.random((1, 1, 64, 64))

    def forward() -> np.ndarray:
        return np.concatenate([out.ravel() for out in model.predict(x)])

    def backward(projection: np.ndarray) -> Dict[str, np.ndarray]:
        outputs, caches = model.forward(x)
        pieces, start = [], 0
        for out in outputs:
            pieces.append(projection[start : start + out.size].reshape(out.shape))
            start += out.size
        grad_x, grads = model.backward(caches, pieces)
        return {"input": grad_x, **grads}

    tensors = {"input": x, **tensors_of(model.parameters())}
    report = gradcheck(
        "model", forward, backward, tensors, tolerance=COMPOSITE_TOLERANCE, seed=seed, max_entries=max_entries
    )
    return GradcheckCase("model", x.shape, report)


def run_gradcheck_suite(seed: int = 0, include_model: bool = True, model_entries: int = 3) -> List[GradcheckCase]:
    """All cases in a fixed order; deterministic per seed."""
    with precision("double"):
        rng = np.random.default_rng(seed)
        cases = _primitive_cases(rng, seed)
        cases.extend(_composite_cases(rng, seed))
        cases.append(_loss_case(rng, seed))
        if include_model:
            cases.append(_model_case(rng, seed, model_entries))
    return cases


def suite_table(cases: List[GradcheckCase]) -> str:
    lines = [f"{'op':<22} {'shape':<18} {'max_rel_err':>12} {'result':>6}", "-" * 61]
    for case in cases:
        result = "pass" if case.report.passed else "FAIL"
        shape = "x".join(str(d) for d in case.shape)
        lines.append(f"{case.label:<22} {shape:<18} {case.report.max_rel_error:>12.3e} {result:>6}")
    return "\n".join(lines)

