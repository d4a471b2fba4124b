"""
Dynamic head attention: scale gating per level, deformable spatial
aggregation across levels, and the dynamic two-piece task activation.

All three attentions operate on the canonical view of a feature pyramid:
every level resampled to the grid of the median level and stacked as an
(N, L, C, H, W) array. ``FeatureLevels.as_lsc()`` exposes the same data
as (N, L, S, C).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from .errors import ShapeError
from .layers import Grads, prefixed
from .tensor import (
    ConvParams,
    Tensor,
    avg_pool,
    avg_pool_backward,
    bilinear_sample,
    bilinear_sample_backward,
    conv2d_backward,
    conv2d_forward,
    get_dtype,
    hard_sigmoid,
    hard_sigmoid_backward,
    layer_norm,
    layer_norm_backward,
    relu,
    relu_backward,
    sigmoid,
    upsample_nearest,
    upsample_nearest_backward,
)

DEFAULT_POINTS = 9
DEFAULT_REDUCTION = 4
MIN_THETA_HIDDEN = 4
# shifted sigmoid of 4.0 is ~0.96, so alpha1 starts near 1 and the block near ReLU
ALPHA1_INIT_LOGIT = 4.0


def median_level(num_levels: int) -> int:
    """Lower median for even level counts."""
    return (num_levels - 1) // 2


def _resample_factor(native: Tuple[int, int], reference: Tuple[int, int]) -> Tuple[str, int]:
    (h, w), (rh, rw) = native, reference
    if (h, w) == (rh, rw):
        return "same", 1
    if rh % h == 0 and rw % w == 0 and rh // h == rw // w:
        return "up", rh // h
    if h % rh == 0 and w % rw == 0 and h // rh == w // rw:
        return "down", h // rh
    raise ShapeError(f"level {native} cannot be resampled onto reference grid {reference}")


def levels_to_reference(levels: Sequence[np.ndarray], reference: int) -> np.ndarray:
    channels = {level.shape[1] for level in levels}
    if len(channels) != 1:
        raise ShapeError(f"feature levels disagree on channels: {[tuple(l.shape) for l in levels]}")
    ref_hw = levels[reference].shape[2:]
    resampled = []
    for level in levels:
        kind, factor = _resample_factor(level.shape[2:], ref_hw)
        if kind == "up":
            resampled.append(upsample_nearest(level, factor))
        elif kind == "down":
            resampled.append(avg_pool(level, factor))
        else:
            resampled.append(level)
    return np.stack(resampled, axis=1)


def levels_to_reference_backward(
    grad_view: np.ndarray, shapes: Sequence[Tuple[int, int]], reference: int
) -> List[np.ndarray]:
    ref_hw = shapes[reference]
    grads = []
    for index, shape in enumerate(shapes):
        kind, factor = _resample_factor(shape, ref_hw)
        grad = grad_view[:, index]
        if kind == "up":
            grad = upsample_nearest_backward(grad, factor)
        elif kind == "down":
            grad = avg_pool_backward(grad, factor)
        grads.append(grad)
    return grads


def reference_to_levels(view: np.ndarray, shapes: Sequence[Tuple[int, int]]) -> List[np.ndarray]:
    ref_hw = view.shape[3:]
    levels = []
    for index, shape in enumerate(shapes):
        kind, factor = _resample_factor(shape, ref_hw)
        level = view[:, index]
        if kind == "up":
            level = avg_pool(level, factor)
        elif kind == "down":
            level = upsample_nearest(level, factor)
        levels.append(np.ascontiguousarray(level))
    return levels


def reference_to_levels_backward(
    grads: Sequence[np.ndarray], shapes: Sequence[Tuple[int, int]], reference_hw: Tuple[int, int]
) -> np.ndarray:
    resampled = []
    for grad, shape in zip(grads, shapes):
        kind, factor = _resample_factor(shape, reference_hw)
        if kind == "up":
            grad = avg_pool_backward(grad, factor)
        elif kind == "down":
            grad = upsample_nearest_backward(grad, factor)
        resampled.append(grad)
    return np.stack(resampled, axis=1)


@dataclass
class FeatureLevels:
    view: np.ndarray
    reference: int
    native_shapes: Tuple[Tuple[int, int], ...]

    def __post_init__(self) -> None:
        if self.view.ndim != 5 or self.view.shape[1] != len(self.native_shapes):
            raise ShapeError(
                f"canonical view {tuple(self.view.shape)} does not hold {len(self.native_shapes)} levels"
            )

    @classmethod
    def from_levels(cls, levels: Sequence[np.ndarray], reference: int | None = None) -> "FeatureLevels":
        if not levels:
            raise ShapeError("FeatureLevels needs at least one level")
        ref = median_level(len(levels)) if reference is None else reference
        shapes = tuple(tuple(level.shape[2:]) for level in levels)
        return cls(view=levels_to_reference(levels, ref), reference=ref, native_shapes=shapes)

    @property
    def num_levels(self) -> int:
        return self.view.shape[1]

    @property
    def channels(self) -> int:
        return self.view.shape[2]

    def as_lsc(self) -> np.ndarray:
        n, l, c, h, w = self.view.shape
        return self.view.transpose(0, 1, 3, 4, 2).reshape(n, l, h * w, c)

    def to_levels(self) -> List[np.ndarray]:
        return reference_to_levels(self.view, self.native_shapes)

    def with_view(self, view: np.ndarray) -> "FeatureLevels":
        return replace(self, view=view)


def grid_offsets(points: int) -> np.ndarray:
    """Regular sqrt(K) x sqrt(K) sampling grid, row-major, as (K, 2) (dy, dx)."""
    side = int(round(math.sqrt(points)))
    if side * side != points or side % 2 == 0:
        raise ValueError(f"sampling point count {points} must be an odd square")
    half = side // 2
    return np.array([(dy, dx) for dy in range(-half, half + 1) for dx in range(-half, half + 1)], dtype=np.float64)


class DyHeadBlock:
    def __init__(
        self,
        scale_fc: ConvParams,
        offset_conv: ConvParams,
        spatial_weights: Tensor,
        theta_fc1: ConvParams,
        theta_fc2: ConvParams,
    ) -> None:
        channels = scale_fc.in_channels
        points = spatial_weights.shape[0]
        if scale_fc.out_channels != 1 or scale_fc.kernel_size != (1, 1):
            raise ShapeError(f"scale_fc must be a 1x1 C->1 conv, got {scale_fc.weight.shape}")
        if offset_conv.out_channels != 3 * points or offset_conv.in_channels != channels:
            raise ShapeError(
                f"offset_conv {offset_conv.weight.shape} must map {channels} channels to 3K={3 * points}"
            )
        if theta_fc1.in_channels != channels or theta_fc2.out_channels != 4 * channels:
            raise ShapeError(
                f"task hyperfunction {theta_fc1.weight.shape}/{theta_fc2.weight.shape} "
                f"does not produce 4 coefficients per channel for C={channels}"
            )
        self.scale_fc = scale_fc
        self.offset_conv = offset_conv
        self.spatial_weights = spatial_weights
        self.theta_fc1 = theta_fc1
        self.theta_fc2 = theta_fc2
        self.offsets = grid_offsets(points)

    @classmethod
    def create(
        cls,
        channels: int,
        rng: np.random.Generator,
        points: int = DEFAULT_POINTS,
        reduction: int = DEFAULT_REDUCTION,
    ) -> "DyHeadBlock":
        dtype = get_dtype()
        side = int(round(math.sqrt(points)))
        hidden = max(MIN_THETA_HIDDEN, channels // reduction)
        scale_fc = ConvParams.create(channels, 1, 1, rng)
        offset_conv = ConvParams.create(channels, 3 * points, side, rng, zero=True)
        # modulation starts at sigmoid(0) = 0.5, so 2/K makes the zero-offset sum a plain mean
        spatial_weights = Tensor(np.full(points, 2.0 / points, dtype=dtype))
        theta_fc1 = ConvParams.create(channels, hidden, 1, rng)
        theta_fc2 = ConvParams.create(hidden, 4 * channels, 1, rng)
        theta_fc2.weight.data[...] = rng.uniform(-0.01, 0.01, size=theta_fc2.weight.shape).astype(dtype)
        theta_fc2.bias.data[:channels] = ALPHA1_INIT_LOGIT
        return cls(scale_fc, offset_conv, spatial_weights, theta_fc1, theta_fc2)

    @property
    def channels(self) -> int:
        return self.scale_fc.in_channels

    @property
    def points(self) -> int:
        return self.spatial_weights.shape[0]

    def parameters(self) -> Dict[str, Tensor]:
        return {
            **prefixed("scale_fc", self.scale_fc.parameters()),
            **prefixed("offset_conv", self.offset_conv.parameters()),
            "spatial_weights": self.spatial_weights,
            **prefixed("theta_fc1", self.theta_fc1.parameters()),
            **prefixed("theta_fc2", self.theta_fc2.parameters()),
        }

    def _check(self, view: np.ndarray) -> None:
        if view.ndim != 5 or view.shape[2] != self.channels:
            raise ShapeError(f"DyHead input {tuple(view.shape)} does not match channels={self.channels}")

    # -- scale attention ---------------------------------------------------

    def scale_forward(self, view: np.ndarray) -> Tuple[np.ndarray, Any]:
        self._check(view)
        n, l, c = view.shape[:3]
        pooled = view.mean(axis=(3, 4)).reshape(n * l, c, 1, 1)
        logits = conv2d_forward(pooled, self.scale_fc).reshape(n, l)
        gates = hard_sigmoid(logits)
        return view * gates[:, :, None, None, None], (view, pooled, logits, gates)

    def scale_backward(self, cache: Any, grad: np.ndarray) -> Tuple[np.ndarray, Grads]:
        view, pooled, logits, gates = cache
        n, l, c, h, w = view.shape
        grad_view = grad * gates[:, :, None, None, None]
        grad_gates = (grad * view).sum(axis=(2, 3, 4))
        grad_logits = hard_sigmoid_backward(logits, grad_gates).reshape(n * l, 1, 1, 1)
        grad_pooled, grad_w, grad_b = conv2d_backward(pooled, self.scale_fc, grad_logits)
        grad_view = grad_view + grad_pooled.reshape(n, l, c)[:, :, :, None, None] / (h * w)
        return grad_view, {"scale_fc.weight": grad_w, "scale_fc.bias": grad_b}

    # -- spatial attention -------------------------------------------------

    def predict_offsets(self, view: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Offsets (N, K, 2, H, W) and modulations (N, K, H, W) from the median level."""
        raw = conv2d_forward(view[:, median_level(view.shape[1])], self.offset_conv)
        k = self.points
        n, _, h, w = raw.shape
        offsets = raw[:, : 2 * k].reshape(n, k, 2, h, w)
        return raw, offsets, sigmoid(raw[:, 2 * k :])

    def _sample_points(self, offsets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        n, k, _, h, w = offsets.shape
        rows = np.arange(h, dtype=offsets.dtype)[None, None, :, None]
        cols = np.arange(w, dtype=offsets.dtype)[None, None, None, :]
        grid = self.offsets.astype(offsets.dtype)
        ys = rows + grid[None, :, 0, None, None] + offsets[:, :, 0]
        xs = cols + grid[None, :, 1, None, None] + offsets[:, :, 1]
        return ys, xs

    def spatial_forward(self, view: np.ndarray) -> Tuple[np.ndarray, Any]:
        self._check(view)
        n, l, c, h, w = view.shape
        raw, offsets, modulation = self.predict_offsets(view)
        ys, xs = self._sample_points(offsets)
        weights = self.spatial_weights.data
        samples = np.empty((l, self.points, n, c, h, w), dtype=np.result_type(view.dtype, raw.dtype))
        aggregate = np.zeros((n, c, h, w), dtype=samples.dtype)
        for level in range(l):
            for k in range(self.points):
                samples[level, k] = bilinear_sample(view[:, level], ys[:, k], xs[:, k])
                aggregate += weights[k] * modulation[:, k, None] * samples[level, k]
        aggregate /= l
        out = np.broadcast_to(aggregate[:, None], view.shape).copy()
        return out, (view, raw, modulation, ys, xs, samples)

    def spatial_backward(self, cache: Any, grad: np.ndarray) -> Tuple[np.ndarray, Grads]:
        view, raw, modulation, ys, xs, samples = cache
        n, l, c, h, w = view.shape
        k_points = self.points
        weights = self.spatial_weights.data
        grad_agg = grad.sum(axis=1) / l
        grad_view = np.zeros_like(view, dtype=np.result_type(view.dtype, grad.dtype))
        grad_weights = np.zeros_like(weights, dtype=grad_view.dtype)
        grad_raw = np.zeros_like(raw, dtype=grad_view.dtype)
        level_sum = samples.sum(axis=0)
        for k in range(k_points):
            grad_weights[k] = np.sum(grad_agg * modulation[:, k, None] * level_sum[k])
            grad_mod = weights[k] * np.sum(grad_agg * level_sum[k], axis=1)
            grad_raw[:, 2 * k_points + k] = grad_mod * modulation[:, k] * (1.0 - modulation[:, k])
            grad_sample = grad_agg * (weights[k] * modulation[:, k, None])
            for level in range(l):
                g_in, g_y, g_x = bilinear_sample_backward(view[:, level], ys[:, k], xs[:, k], grad_sample)
                grad_view[:, level] += g_in
                grad_raw[:, 2 * k] += g_y
                grad_raw[:, 2 * k + 1] += g_x
        median = median_level(l)
        grad_med, grad_w, grad_b = conv2d_backward(view[:, median], self.offset_conv, grad_raw)
        grad_view[:, median] += grad_med
        return grad_view, {
            "offset_conv.weight": grad_w,
            "offset_conv.bias": grad_b,
            "spatial_weights": grad_weights,
        }

    # -- task attention ----------------------------------------------------

    def theta_forward(self, view: np.ndarray) -> Tuple[np.ndarray, Any]:
        n, _, c = view.shape[:3]
        pooled = view.mean(axis=(1, 3, 4)).reshape(n, c, 1, 1)
        hidden = conv2d_forward(pooled, self.theta_fc1)
        normed = layer_norm(hidden)
        activated = relu(normed)
        logits = conv2d_forward(activated, self.theta_fc2)
        coefficients = (2.0 * sigmoid(logits) - 1.0).reshape(n, 4 * c)
        return coefficients, (pooled, hidden, normed, activated, logits)

    def theta_backward(self, cache: Any, grad_coefficients: np.ndarray) -> Tuple[np.ndarray, Grads]:
        pooled, hidden, normed, activated, logits = cache
        s = sigmoid(logits)
        grad_logits = grad_coefficients.reshape(logits.shape) * 2.0 * s * (1.0 - s)
        grad_act, grad_w2, grad_b2 = conv2d_backward(activated, self.theta_fc2, grad_logits)
        grad_normed = relu_backward(normed, grad_act)
        grad_hidden = layer_norm_backward(hidden, grad_normed)
        grad_pooled, grad_w1, grad_b1 = conv2d_backward(pooled, self.theta_fc1, grad_hidden)
        grads = {
            "theta_fc1.weight": grad_w1,
            "theta_fc1.bias": grad_b1,
            "theta_fc2.weight": grad_w2,
            "theta_fc2.bias": grad_b2,
        }
        return grad_pooled.reshape(pooled.shape[:2]), grads

    def task_forward(self, view: np.ndarray) -> Tuple[np.ndarray, Any]:
        self._check(view)
        coefficients, theta_cache = self.theta_forward(view)
        return apply_task_coefficients(view, coefficients), (view, coefficients, theta_cache)

    def task_backward(self, cache: Any, grad: np.ndarray) -> Tuple[np.ndarray, Grads]:
        view, coefficients, theta_cache = cache
        n, l, c, h, w = view.shape
        a1, a2, b1, b2 = (_broadcast(part) for part in np.split(coefficients, 4, axis=1))
        first = (a1 * view + b1) >= (a2 * view + b2)
        second = ~first
        grad_view = grad * np.where(first, a1, a2)
        grad_coefficients = np.concatenate(
            [
                (grad * view * first).sum(axis=(1, 3, 4)),
                (grad * view * second).sum(axis=(1, 3, 4)),
                (grad * first).sum(axis=(1, 3, 4)),
                (grad * second).sum(axis=(1, 3, 4)),
            ],
            axis=1,
        )
        grad_pooled, grads = self.theta_backward(theta_cache, grad_coefficients)
        grad_view = grad_view + grad_pooled[:, None, :, None, None] / (l * h * w)
        return grad_view, grads

    # -- composition -------------------------------------------------------

    def forward(self, view: np.ndarray) -> Tuple[np.ndarray, Any]:
        scaled, c_scale = self.scale_forward(view)
        spatial, c_spatial = self.spatial_forward(scaled)
        out, c_task = self.task_forward(spatial)
        return out, (c_scale, c_spatial, c_task)

    def backward(self, cache: Any, grad: np.ndarray) -> Tuple[np.ndarray, Grads]:
        c_scale, c_spatial, c_task = cache
        grads: Grads = {}
        grad, g_task = self.task_backward(c_task, grad)
        grad, g_spatial = self.spatial_backward(c_spatial, grad)
        grad, g_scale = self.scale_backward(c_scale, grad)
        for part in (g_scale, g_spatial, g_task):
            grads.update(part)
        return grad, grads


def _broadcast(per_channel: np.ndarray) -> np.ndarray:
    return per_channel[:, None, :, None, None]


def apply_task_coefficients(view: np.ndarray, coefficients: np.ndarray) -> np.ndarray:
    """max(a1 * F_c + b1, a2 * F_c + b2) per channel; coefficients are (N, 4C)."""
    n, _, c = view.shape[:3]
    if coefficients.shape != (n, 4 * c):
        raise ShapeError(f"task coefficients {tuple(coefficients.shape)} do not match view {tuple(view.shape)}")
    a1, a2, b1, b2 = (_broadcast(part) for part in np.split(coefficients, 4, axis=1))
    return np.maximum(a1 * view + b1, a2 * view + b2)


def scale_attention(features: FeatureLevels, block: DyHeadBlock) -> FeatureLevels:
    out, _ = block.scale_forward(features.view)
    return features.with_view(out)


def spatial_attention(features: FeatureLevels, block: DyHeadBlock) -> FeatureLevels:
    out, _ = block.spatial_forward(features.view)
    return features.with_view(out)


def task_attention(features: FeatureLevels, block: DyHeadBlock) -> FeatureLevels:
    out, _ = block.task_forward(features.view)
    return features.with_view(out)


def dyhead_block(features: FeatureLevels, block: DyHeadBlock) -> FeatureLevels:
    """Scale, then spatial, then task attention."""
    out, _ = block.forward(features.view)
    return features.with_view(out)


def dyhead_stack(features: FeatureLevels, blocks: Sequence[DyHeadBlock]) -> FeatureLevels:
    if not blocks:
        raise ValueError("dyhead_stack needs at least one block")
    for block in blocks:
        features = dyhead_block(features, block)
    return features


def attention_gates(features: FeatureLevels, block: DyHeadBlock) -> Dict[str, np.ndarray]:
    """Scale gates (N, L) and task coefficients (N, 4C) the block would apply."""
    scaled, (_, _, _, gates) = block.scale_forward(features.view)
    spatial, _ = block.spatial_forward(scaled)
    coefficients, _ = block.theta_forward(spatial)
    return {"scale_gates": gates, "task_coefficients": coefficients}


class DyHeadStack:
    """Nested DyHead blocks with independent parameters, operating on canonical views."""

    def __init__(self, blocks: Sequence[DyHeadBlock]) -> None:
        if not blocks:
            raise ValueError("DyHeadStack needs at least one block")
        self.blocks = list(blocks)

    def forward(self, view: np.ndarray) -> Tuple[np.ndarray, Any]:
        caches = []
        for block in self.blocks:
            view, cache = block.forward(view)
            caches.append(cache)
        return view, caches

    def backward(self, cache: Any, grad: np.ndarray) -> Tuple[np.ndarray, Grads]:
        grads: Grads = {}
        for index in reversed(range(len(self.blocks))):
            grad, block_grads = self.blocks[index].backward(cache[index], grad)
            grads.update(prefixed(f"block{index}", block_grads))
        return grad, grads

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for index, block in enumerate(self.blocks):
            params.update(prefixed(f"block{index}", block.parameters()))
        return params
