"""
Multi-scale feature aggregation: parallel dilated 3x3 branches, each refined
by a 1x1 convolution, summed.
"""

from __future__ import annotations

from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from .errors import ShapeError
from .layers import Grads, prefixed
from .tensor import ConvParams, Tensor, conv2d_backward, conv2d_forward, get_activation

DEFAULT_DILATIONS = (1, 3, 5)


class MsfaBlock:
    def __init__(
        self,
        branch_convs: Sequence[ConvParams],
        point_convs: Sequence[ConvParams],
        activation: str = "silu",
    ) -> None:
        if len(branch_convs) != len(point_convs) or not branch_convs:
            raise ValueError("MSFA needs one point conv per branch and at least one branch")
        out_channels = {conv.out_channels for conv in point_convs}
        if len(out_channels) != 1:
            raise ShapeError(f"MSFA point convs disagree on output channels: {sorted(out_channels)}")
        for branch, point in zip(branch_convs, point_convs):
            if branch.stride != 1 or branch.padding != branch.dilation:
                raise ShapeError(
                    f"MSFA branch with dilation {branch.dilation} must use stride 1 and padding == dilation"
                )
            if point.in_channels != branch.out_channels or point.kernel_size != (1, 1):
                raise ShapeError(
                    f"point conv {point.weight.shape} does not refine branch output {branch.weight.shape}"
                )
        self.branch_convs: List[ConvParams] = list(branch_convs)
        self.point_convs: List[ConvParams] = list(point_convs)
        self.activation = activation
        self._act, self._act_backward = get_activation(activation)

    @classmethod
    def create(
        cls,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        mid_channels: int | None = None,
        dilations: Sequence[int] = DEFAULT_DILATIONS,
        activation: str = "silu",
    ) -> "MsfaBlock":
        mid = mid_channels if mid_channels is not None else max(1, in_channels // 2)
        branches = [ConvParams.create(in_channels, mid, 3, rng, padding=d, dilation=d) for d in dilations]
        points = [ConvParams.create(mid, out_channels, 1, rng) for _ in dilations]
        return cls(branches, points, activation)

    @property
    def in_channels(self) -> int:
        return self.branch_convs[0].in_channels

    @property
    def mid_channels(self) -> int:
        return self.branch_convs[0].out_channels

    @property
    def out_channels(self) -> int:
        return self.point_convs[0].out_channels

    @property
    def dilations(self) -> List[int]:
        return [conv.dilation for conv in self.branch_convs]

    def branch_forward(self, x: np.ndarray, index: int) -> np.ndarray:
        hidden = self._act(conv2d_forward(x, self.branch_convs[index]))
        return conv2d_forward(hidden, self.point_convs[index])

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, Any]:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"MSFA input {tuple(x.shape)} does not match in_channels={self.in_channels}")
        out = None
        caches = []
        for branch, point in zip(self.branch_convs, self.point_convs):
            z = conv2d_forward(x, branch)
            hidden = self._act(z)
            y = conv2d_forward(hidden, point)
            out = y if out is None else out + y
            caches.append((z, hidden))
        return out, (x, caches)

    def backward(self, cache: Any, grad: np.ndarray) -> Tuple[np.ndarray, Grads]:
        x, caches = cache
        grads: Grads = {}
        grad_input = np.zeros_like(x, dtype=np.result_type(x.dtype, grad.dtype))
        for index, ((z, hidden), branch, point) in enumerate(zip(caches, self.branch_convs, self.point_convs)):
            grad_hidden, grad_pw, grad_pb = conv2d_backward(hidden, point, grad)
            grad_z = self._act_backward(z, grad_hidden)
            grad_x, grad_bw, grad_bb = conv2d_backward(x, branch, grad_z)
            grad_input += grad_x
            grads[f"branch{index}.weight"] = grad_bw
            grads[f"branch{index}.bias"] = grad_bb
            grads[f"point{index}.weight"] = grad_pw
            grads[f"point{index}.bias"] = grad_pb
        return grad_input, grads

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for index, (branch, point) in enumerate(zip(self.branch_convs, self.point_convs)):
            params.update(prefixed(f"branch{index}", branch.parameters()))
            params.update(prefixed(f"point{index}", point.parameters()))
        return params


def msfa_forward(x: np.ndarray, block: MsfaBlock) -> np.ndarray:
    out, _ = block.forward(x)
    return out


def msfa_backward(x: np.ndarray, block: MsfaBlock, grad_out: np.ndarray) -> Tuple[np.ndarray, Grads]:
    out, cache = block.forward(x)
    if grad_out.shape != out.shape:
        raise ShapeError(f"MSFA grad_out {tuple(grad_out.shape)} does not match output {tuple(out.shape)}")
    return block.backward(cache, grad_out)
