"""
Detection network: reduced CSP backbone with an MSFA tail, a two-output
neck (stride 8 and 16; the stride-32 branch is removed and an extra
convolution added), a DyHead stack over the two levels, and per-scale
prediction convolutions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from config.settings import ModelConfig

from .dyhead import (
    DyHeadBlock,
    DyHeadStack,
    MIN_THETA_HIDDEN,
    levels_to_reference,
    levels_to_reference_backward,
    reference_to_levels,
    reference_to_levels_backward,
)
from .errors import ShapeError
from .layers import C3Block, ConvBlock, Grads, Layer, Sequential, prefixed
from .msfa import MsfaBlock
from .tensor import Tensor, concat_channels, split_channels, upsample_nearest, upsample_nearest_backward
from .utils import configure_logger

REQUIRED_DIVISOR = 32


@dataclass
class ModelSummary:
    parameters: int
    size_mb: float
    strides: Tuple[int, ...]
    layers: List[Tuple[str, Tuple[int, ...]]] = field(default_factory=list)

    def table(self) -> str:
        rows = [f"{'layer':<24} shape"]
        rows.extend(f"{name:<24} {'x'.join(str(d) for d in shape)}" for name, shape in self.layers)
        rows.append(f"parameters={self.parameters} size_mb={self.size_mb:.3f} strides={list(self.strides)}")
        return "\n".join(rows)


class Detector:
    def __init__(self, config: ModelConfig, seed: int = 0) -> None:
        config.validate()
        self.config = config
        self.seed = seed
        self.logger = configure_logger("detnet")
        rng = np.random.default_rng(seed)
        c = [config.channels(i) for i in range(5)]
        n = config.depth
        self.widths = c

        self.stem = ConvBlock.create(1, c[0], 3, rng, stride=2)
        self.stage2 = self._stage(c[0], c[1], n, rng)
        self.stage3 = self._stage(c[1], c[2], n, rng)
        self.stage4 = self._stage(c[2], c[3], n, rng)
        tail: Layer
        if config.use_msfa:
            tail = MsfaBlock.create(c[4], c[4], rng, dilations=config.msfa_dilations)
        else:
            tail = ConvBlock.create(c[4], c[4], 3, rng)
        self.stage5 = Sequential(
            [
                ("down", ConvBlock.create(c[3], c[4], 3, rng, stride=2)),
                ("c3", C3Block(c[4], c[4], n, rng)),
                ("msfa" if config.use_msfa else "tail", tail),
            ]
        )

        self.lateral5 = ConvBlock.create(c[4], c[3], 1, rng)
        self.merge4 = C3Block(2 * c[3], c[3], n, rng, shortcut=False)
        self.lateral4 = ConvBlock.create(c[3], c[2], 1, rng)
        self.merge3 = C3Block(2 * c[2], c[2], n, rng, shortcut=False)
        self.down3 = ConvBlock.create(c[2], c[2], 3, rng, stride=2)
        mid_out = c[3] if config.neck_extra_conv else c[2]
        self.merge_mid = C3Block(2 * c[2], mid_out, n, rng, shortcut=False)
        self.extra = ConvBlock.create(c[3], c[2], 3, rng) if config.neck_extra_conv else None

        self.dyhead = (
            DyHeadStack(
                [
                    DyHeadBlock.create(c[2], rng, points=config.dyhead_points, reduction=config.dyhead_reduction)
                    for _ in range(config.dyhead_blocks)
                ]
            )
            if config.dyhead_blocks > 0
            else None
        )

        outputs = config.anchors_per_scale * config.outputs_per_anchor
        self.heads = [ConvBlock.create(c[2], outputs, 1, rng, activation="identity") for _ in config.strides]
        self._init_prior_biases()

    @staticmethod
    def _stage(in_channels: int, out_channels: int, depth: int, rng: np.random.Generator) -> Sequential:
        return Sequential(
            [
                ("down", ConvBlock.create(in_channels, out_channels, 3, rng, stride=2)),
                ("c3", C3Block(out_channels, out_channels, depth, rng)),
            ]
        )

    def _init_prior_biases(self) -> None:
        """Objectness prior of ~8 targets per image, class prior 0.6."""
        cfg = self.config
        no = cfg.outputs_per_anchor
        for head, stride in zip(self.heads, cfg.strides):
            bias = head.conv.bias.data.reshape(cfg.anchors_per_scale, no)
            bias[:, 4] += math.log(8.0 / (cfg.input_size / stride) ** 2)
            bias[:, 5:] += math.log(0.6 / (cfg.num_classes - 0.99))

    # -- structure ---------------------------------------------------------

    def named_modules(self) -> List[Tuple[str, Layer]]:
        modules: List[Tuple[str, Layer]] = [
            ("backbone.stem", self.stem),
            ("backbone.stage2", self.stage2),
            ("backbone.stage3", self.stage3),
            ("backbone.stage4", self.stage4),
            ("backbone.stage5", self.stage5),
            ("neck.lateral5", self.lateral5),
            ("neck.merge4", self.merge4),
            ("neck.lateral4", self.lateral4),
            ("neck.merge3", self.merge3),
            ("neck.down3", self.down3),
            ("neck.merge_mid", self.merge_mid),
        ]
        if self.extra is not None:
            modules.append(("neck.extra", self.extra))
        if self.dyhead is not None:
            modules.append(("dyhead", self.dyhead))
        for stride, head in zip(self.config.strides, self.heads):
            modules.append((f"head.s{stride}", head))
        return modules

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for name, module in self.named_modules():
            params.update(prefixed(name, module.parameters()))
        return params

    def parameter_count(self) -> int:
        return sum(tensor.size for tensor in self.parameters().values())

    def zero_grad(self) -> None:
        for tensor in self.parameters().values():
            tensor.zero_grad()

    def assign_grads(self, grads: Dict[str, np.ndarray]) -> None:
        for name, tensor in self.parameters().items():
            tensor.grad = None
            if name in grads:
                tensor.accumulate(grads[name])

    def astype(self, dtype: np.dtype) -> "Detector":
        for tensor in self.parameters().values():
            tensor.data = tensor.data.astype(dtype)
            tensor.grad = None
        return self

    def summary(self, height: int | None = None, width: int | None = None) -> ModelSummary:
        size = self.config.input_size
        trace: List[Tuple[str, Tuple[int, ...]]] = []
        x = np.zeros((1, 1, height or size, width or size), dtype=self.stem.conv.weight.data.dtype)
        self.forward(x, trace=trace)
        count = self.parameter_count()
        return ModelSummary(
            parameters=count,
            size_mb=count * 4 / 1e6,
            strides=tuple(self.config.strides),
            layers=trace,
        )

    # -- passes ------------------------------------------------------------

    def check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"detector expects N x 1 x H x W input, got {tuple(x.shape)}")
        h, w = x.shape[2:]
        if h % REQUIRED_DIVISOR or w % REQUIRED_DIVISOR:
            pad_h = (-h) % REQUIRED_DIVISOR
            pad_w = (-w) % REQUIRED_DIVISOR
            raise ShapeError(
                f"input {h}x{w} is not divisible by {REQUIRED_DIVISOR}; "
                f"pad by {pad_h} rows and {pad_w} columns to {h + pad_h}x{w + pad_w}"
            )

    def forward(
        self, x: np.ndarray, trace: List[Tuple[str, Tuple[int, ...]]] | None = None
    ) -> Tuple[List[np.ndarray], Any]:
        self.check_input(x)
        caches: Dict[str, Any] = {}

        def run(name: str, module: Layer, value: np.ndarray) -> np.ndarray:
            out, caches[name] = module.forward(value)
            if trace is not None:
                trace.append((name, tuple(out.shape)))
            return out

        x1 = run("stem", self.stem, x)
        x2 = run("stage2", self.stage2, x1)
        p3 = run("stage3", self.stage3, x2)
        p4 = run("stage4", self.stage4, p3)
        p5 = run("stage5", self.stage5, p4)

        h10 = run("lateral5", self.lateral5, p5)
        m4 = run("merge4", self.merge4, concat_channels([upsample_nearest(h10, 2), p4]))
        h14 = run("lateral4", self.lateral4, m4)
        small = run("merge3", self.merge3, concat_channels([upsample_nearest(h14, 2), p3]))
        d = run("down3", self.down3, small)
        mid = run("merge_mid", self.merge_mid, concat_channels([d, h14]))
        if self.extra is not None:
            mid = run("extra", self.extra, mid)

        levels = [small, mid]
        shapes = tuple(tuple(level.shape[2:]) for level in levels)
        caches["shapes"] = shapes
        if self.dyhead is not None:
            view = levels_to_reference(levels, 0)
            view = run("dyhead", self.dyhead, view)
            levels = reference_to_levels(view, shapes)
            caches["reference_hw"] = tuple(view.shape[3:])

        outputs = []
        for index, (stride, head) in enumerate(zip(self.config.strides, self.heads)):
            outputs.append(run(f"head.s{stride}", head, levels[index]))
        return outputs, caches

    def backward(self, caches: Any, grads_out: Sequence[np.ndarray]) -> Tuple[np.ndarray, Grads]:
        c = self.widths
        grads: Grads = {}

        def back(name: str, module: Layer, grad: np.ndarray, prefix: str) -> np.ndarray:
            grad_in, module_grads = module.backward(caches[name], grad)
            grads.update(prefixed(prefix, module_grads))
            return grad_in

        level_grads = [
            back(f"head.s{stride}", head, grad, f"head.s{stride}")
            for stride, head, grad in zip(self.config.strides, self.heads, grads_out)
        ]
        shapes = caches["shapes"]
        if self.dyhead is not None:
            grad_view = reference_to_levels_backward(level_grads, shapes, caches["reference_hw"])
            grad_view = back("dyhead", self.dyhead, grad_view, "dyhead")
            level_grads = levels_to_reference_backward(grad_view, shapes, 0)
        grad_small, grad_mid = level_grads

        if self.extra is not None:
            grad_mid = back("extra", self.extra, grad_mid, "neck.extra")
        grad_cat3 = back("merge_mid", self.merge_mid, grad_mid, "neck.merge_mid")
        grad_d, grad_h14 = split_channels(grad_cat3, [c[2], c[2]])
        grad_small = grad_small + back("down3", self.down3, grad_d, "neck.down3")
        grad_cat2 = back("merge3", self.merge3, grad_small, "neck.merge3")
        grad_up2, grad_p3 = split_channels(grad_cat2, [c[2], c[2]])
        grad_h14 = grad_h14 + upsample_nearest_backward(grad_up2, 2)
        grad_m4 = back("lateral4", self.lateral4, grad_h14, "neck.lateral4")
        grad_cat1 = back("merge4", self.merge4, grad_m4, "neck.merge4")
        grad_up1, grad_p4 = split_channels(grad_cat1, [c[3], c[3]])
        grad_p5 = back("lateral5", self.lateral5, upsample_nearest_backward(grad_up1, 2), "neck.lateral5")

        grad_p4 = grad_p4 + back("stage5", self.stage5, grad_p5, "backbone.stage5")
        grad_p3 = grad_p3 + back("stage4", self.stage4, grad_p4, "backbone.stage4")
        grad_x2 = back("stage3", self.stage3, grad_p3, "backbone.stage3")
        grad_x1 = back("stage2", self.stage2, grad_x2, "backbone.stage2")
        grad_x = back("stem", self.stem, grad_x1, "backbone.stem")
        return grad_x, grads

    def predict(self, x: np.ndarray) -> List[np.ndarray]:
        outputs, _ = self.forward(x)
        return outputs


def build_model(config: ModelConfig, seed: int = 0) -> Detector:
    model = Detector(config, seed)
    model.logger.info(
        "Built detector widths=%s depth=%s dyhead_blocks=%s msfa=%s params=%s",
        model.widths,
        config.depth,
        config.dyhead_blocks,
        config.use_msfa,
        model.parameter_count(),
    )
    return model


# ---------------------------------------------------------------------------
# closed-form parameter count
# ---------------------------------------------------------------------------


def _conv(cin: int, cout: int, k: int) -> int:
    return cout * cin * k * k + cout


def _c3(cin: int, cout: int, depth: int) -> int:
    h = max(1, cout // 2)
    return 2 * _conv(cin, h, 1) + depth * (_conv(h, h, 1) + _conv(h, h, 3)) + _conv(2 * h, cout, 1)


def analytic_parameter_count(config: ModelConfig) -> int:
    """Parameter count from layer formulas alone, without building the graph."""
    c = [config.channels(i) for i in range(5)]
    n = config.depth
    total = _conv(1, c[0], 3)
    for i in range(1, 5):
        total += _conv(c[i - 1], c[i], 3) + _c3(c[i], c[i], n)
    if config.use_msfa:
        mid = max(1, c[4] // 2)
        total += len(config.msfa_dilations) * (_conv(c[4], mid, 3) + _conv(mid, c[4], 1))
    else:
        total += _conv(c[4], c[4], 3)
    total += _conv(c[4], c[3], 1) + _c3(2 * c[3], c[3], n)
    total += _conv(c[3], c[2], 1) + _c3(2 * c[2], c[2], n)
    total += _conv(c[2], c[2], 3)
    if config.neck_extra_conv:
        total += _c3(2 * c[2], c[3], n) + _conv(c[3], c[2], 3)
    else:
        total += _c3(2 * c[2], c[2], n)
    k = config.dyhead_points
    side = int(round(math.sqrt(k)))
    hidden = max(MIN_THETA_HIDDEN, c[2] // config.dyhead_reduction)
    block = _conv(c[2], 1, 1) + _conv(c[2], 3 * k, side) + k + _conv(c[2], hidden, 1) + _conv(hidden, 4 * c[2], 1)
    total += config.dyhead_blocks * block
    total += len(config.strides) * _conv(c[2], config.anchors_per_scale * config.outputs_per_anchor, 1)
    return total
