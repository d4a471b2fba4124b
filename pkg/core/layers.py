"""
Network building blocks with explicit forward/backward passes.

Every block follows the :class:`Layer` protocol: ``forward`` returns the
output together with an opaque cache, ``backward`` consumes that cache and
returns the input gradient plus a ``name -> gradient`` mapping whose keys
match ``parameters()``.
"""

from __future__ import annotations

from typing import Any, Dict, List, Mapping, Protocol, Sequence, Tuple

import numpy as np

from .tensor import (
    ConvParams,
    Tensor,
    concat_channels,
    conv2d_backward,
    conv2d_forward,
    get_activation,
    split_channels,
)

Grads = Dict[str, np.ndarray]


class Layer(Protocol):
    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, Any]:
        ...

    def backward(self, cache: Any, grad: np.ndarray) -> Tuple[np.ndarray, Grads]:
        ...

    def parameters(self) -> Dict[str, Tensor]:
        ...


def prefixed(prefix: str, items: Mapping[str, Any]) -> Dict[str, Any]:
    return {f"{prefix}.{name}": value for name, value in items.items()}


class ConvBlock:
    """Convolution followed by an elementwise activation (YOLOv5 ``Conv`` without BN)."""

    def __init__(self, params: ConvParams, activation: str = "silu") -> None:
        self.conv = params
        self.activation = activation
        self._act, self._act_backward = get_activation(activation)

    @classmethod
    def create(
        cls,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        dilation: int = 1,
        activation: str = "silu",
    ) -> "ConvBlock":
        params = ConvParams.create(in_channels, out_channels, kernel_size, rng, stride=stride, dilation=dilation)
        return cls(params, activation)

    @property
    def out_channels(self) -> int:
        return self.conv.out_channels

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, Any]:
        z = conv2d_forward(x, self.conv)
        return self._act(z), (x, z)

    def backward(self, cache: Any, grad: np.ndarray) -> Tuple[np.ndarray, Grads]:
        x, z = cache
        grad_z = self._act_backward(z, grad)
        grad_x, grad_w, grad_b = conv2d_backward(x, self.conv, grad_z)
        return grad_x, {"conv.weight": grad_w, "conv.bias": grad_b}

    def parameters(self) -> Dict[str, Tensor]:
        return prefixed("conv", self.conv.parameters())


class Bottleneck:
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, shortcut: bool = True,
                 expansion: float = 0.5) -> None:
        hidden = max(1, int(out_channels * expansion))
        self.cv1 = ConvBlock.create(in_channels, hidden, 1, rng)
        self.cv2 = ConvBlock.create(hidden, out_channels, 3, rng)
        self.add = shortcut and in_channels == out_channels

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, Any]:
        h, c1 = self.cv1.forward(x)
        y, c2 = self.cv2.forward(h)
        return (x + y if self.add else y), (c1, c2)

    def backward(self, cache: Any, grad: np.ndarray) -> Tuple[np.ndarray, Grads]:
        c1, c2 = cache
        grad_h, g2 = self.cv2.backward(c2, grad)
        grad_x, g1 = self.cv1.backward(c1, grad_h)
        if self.add:
            grad_x = grad_x + grad
        grads: Grads = {}
        grads.update(prefixed("cv1", g1))
        grads.update(prefixed("cv2", g2))
        return grad_x, grads

    def parameters(self) -> Dict[str, Tensor]:
        return {**prefixed("cv1", self.cv1.parameters()), **prefixed("cv2", self.cv2.parameters())}


class C3Block:
    """CSP bottleneck with three convolutions."""

    def __init__(self, in_channels: int, out_channels: int, depth: int, rng: np.random.Generator,
                 shortcut: bool = True) -> None:
        hidden = max(1, out_channels // 2)
        self.hidden = hidden
        self.cv1 = ConvBlock.create(in_channels, hidden, 1, rng)
        self.cv2 = ConvBlock.create(in_channels, hidden, 1, rng)
        self.blocks = [Bottleneck(hidden, hidden, rng, shortcut, expansion=1.0) for _ in range(depth)]
        self.cv3 = ConvBlock.create(2 * hidden, out_channels, 1, rng)

    @property
    def out_channels(self) -> int:
        return self.cv3.out_channels

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, Any]:
        a, ca = self.cv1.forward(x)
        block_caches = []
        for block in self.blocks:
            a, cache = block.forward(a)
            block_caches.append(cache)
        b, cb = self.cv2.forward(x)
        y, c3 = self.cv3.forward(concat_channels([a, b]))
        return y, (ca, block_caches, cb, c3)

    def backward(self, cache: Any, grad: np.ndarray) -> Tuple[np.ndarray, Grads]:
        ca, block_caches, cb, c3 = cache
        grads: Grads = {}
        grad_cat, g3 = self.cv3.backward(c3, grad)
        grads.update(prefixed("cv3", g3))
        grad_a, grad_b = split_channels(grad_cat, [self.hidden, self.hidden])
        grad_x, g2 = self.cv2.backward(cb, grad_b)
        grads.update(prefixed("cv2", g2))
        for index in reversed(range(len(self.blocks))):
            grad_a, gb = self.blocks[index].backward(block_caches[index], grad_a)
            grads.update(prefixed(f"m{index}", gb))
        grad_x1, g1 = self.cv1.backward(ca, grad_a)
        grads.update(prefixed("cv1", g1))
        return grad_x + grad_x1, grads

    def parameters(self) -> Dict[str, Tensor]:
        params = {**prefixed("cv1", self.cv1.parameters()), **prefixed("cv2", self.cv2.parameters())}
        for index, block in enumerate(self.blocks):
            params.update(prefixed(f"m{index}", block.parameters()))
        params.update(prefixed("cv3", self.cv3.parameters()))
        return params


class Sequential:
    def __init__(self, layers: Sequence[Tuple[str, Layer]]) -> None:
        self.layers: List[Tuple[str, Layer]] = list(layers)

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, Any]:
        caches = []
        for _, layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, cache: Any, grad: np.ndarray) -> Tuple[np.ndarray, Grads]:
        grads: Grads = {}
        for (name, layer), layer_cache in zip(reversed(self.layers), reversed(cache)):
            grad, layer_grads = layer.backward(layer_cache, grad)
            grads.update(prefixed(name, layer_grads))
        return grad, grads

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for name, layer in self.layers:
            params.update(prefixed(name, layer.parameters()))
        return params
