"""
Array type and the differentiable primitives every other module composes.

Arrays are numpy ndarrays in N, C, H, W layout. Every forward op is a pure
function of its arguments and has an explicit ``*_backward`` counterpart;
there is no autodiff tape.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, Sequence, Tuple

import numpy as np

from .errors import NumericError, ShapeError

PRECISIONS: Dict[str, np.dtype] = {
    "double": np.dtype(np.float64),
    "single": np.dtype(np.float32),
}

_precision = "single"


def set_precision(name: str) -> None:
    """Select the dtype used by initializers and loaders."""
    global _precision
    if name not in PRECISIONS:
        raise ValueError(f"Unknown precision {name!r}; expected one of {sorted(PRECISIONS)}")
    _precision = name


def get_dtype() -> np.dtype:
    return PRECISIONS[_precision]


@contextmanager
def precision(name: str) -> Iterator[np.dtype]:
    previous = _precision
    set_precision(name)
    try:
        yield get_dtype()
    finally:
        set_precision(previous)


@dataclass
class Tensor:
    """Learnable array with a gradient slot."""

    data: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise ShapeError(f"grad shape {self.grad.shape} does not match data shape {self.data.shape}")

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match parameter shape {self.data.shape}")
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def astype(self, dtype: np.dtype) -> "Tensor":
        grad = None if self.grad is None else self.grad.astype(dtype)
        return Tensor(self.data.astype(dtype), grad)


def kaiming_uniform(shape: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """Fan-in Kaiming-uniform init, gain sqrt(2)."""
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
    bound = math.sqrt(6.0 / max(1, fan_in))
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(get_dtype())


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self) -> None:
        if self.weight.data.ndim != 4:
            raise ShapeError(f"conv weight must be 4-D (Cout,Cin,Kh,Kw), got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"conv bias {self.bias.shape} does not match weight {self.weight.shape}")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError(
                f"invalid conv geometry stride={self.stride} padding={self.padding} dilation={self.dilation}"
            )

    @classmethod
    def create(
        cls,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int | None = None,
        dilation: int = 1,
        zero: bool = False,
    ) -> "ConvParams":
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        if zero:
            weight = np.zeros(shape, dtype=get_dtype())
        else:
            weight = kaiming_uniform(shape, rng)
        if padding is None:
            padding = dilation * (kernel_size - 1) // 2
        return cls(
            weight=Tensor(weight),
            bias=Tensor(np.zeros(out_channels, dtype=get_dtype())),
            stride=stride,
            padding=padding,
            dilation=dilation,
        )

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> Tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    def output_size(self, height: int, width: int) -> Tuple[int, int]:
        kh, kw = self.kernel_size
        out_h = (height + 2 * self.padding - self.dilation * (kh - 1) - 1) // self.stride + 1
        out_w = (width + 2 * self.padding - self.dilation * (kw - 1) - 1) // self.stride + 1
        if out_h < 1 or out_w < 1:
            raise ShapeError(
                f"conv with kernel {self.weight.shape} stride={self.stride} padding={self.padding} "
                f"dilation={self.dilation} produces empty output on input {height}x{width}"
            )
        return out_h, out_w

    def parameters(self) -> Dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def parameter_count(self) -> int:
        return self.weight.size + self.bias.size


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _check_conv_input(x: np.ndarray, params: ConvParams) -> Tuple[int, int]:
    if x.ndim != 4 or x.shape[1] != params.in_channels:
        raise ShapeError(f"conv2d input {tuple(x.shape)} does not match weight {params.weight.shape}")
    return params.output_size(x.shape[2], x.shape[3])


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _tap(params: ConvParams, i: int, j: int, out_h: int, out_w: int) -> Tuple[slice, slice]:
    d, s = params.dilation, params.stride
    return (
        slice(i * d, i * d + s * (out_h - 1) + 1, s),
        slice(j * d, j * d + s * (out_w - 1) + 1, s),
    )


def conv2d_forward(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Dilated, strided cross-correlation (no kernel flip)."""
    out_h, out_w = _check_conv_input(x, params)
    weight = params.weight.data
    kh, kw = params.kernel_size
    padded = _pad(x, params.padding)
    dtype = np.result_type(x.dtype, weight.dtype)
    # accumulate as (Cout, N, H, W) so each tap is one BLAS call
    acc = np.zeros((params.out_channels, x.shape[0], out_h, out_w), dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            rows, cols = _tap(params, i, j, out_h, out_w)
            acc += np.tensordot(weight[:, :, i, j], padded[:, :, rows, cols], axes=(1, 1))
    out = acc.transpose(1, 0, 2, 3) + params.bias.data[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(
    x: np.ndarray, params: ConvParams, grad_out: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    out_h, out_w = _check_conv_input(x, params)
    expected = (x.shape[0], params.out_channels, out_h, out_w)
    if grad_out.shape != expected:
        raise ShapeError(f"conv2d grad_out {tuple(grad_out.shape)} does not match output shape {expected}")
    weight = params.weight.data
    kh, kw = params.kernel_size
    padded = _pad(x, params.padding)
    grad_t = grad_out.transpose(1, 0, 2, 3)
    grad_padded = np.zeros_like(padded, dtype=np.result_type(padded.dtype, grad_out.dtype))
    grad_weight = np.zeros_like(weight, dtype=np.result_type(weight.dtype, grad_out.dtype))
    for i in range(kh):
        for j in range(kw):
            rows, cols = _tap(params, i, j, out_h, out_w)
            patch = padded[:, :, rows, cols]
            grad_weight[:, :, i, j] = np.tensordot(grad_t, patch, axes=([1, 2, 3], [0, 2, 3]))
            grad_padded[:, :, rows, cols] += np.tensordot(weight[:, :, i, j], grad_t, axes=(0, 0)).transpose(
                1, 0, 2, 3
            )
    p = params.padding
    grad_input = grad_padded[:, :, p : p + x.shape[2], p : p + x.shape[3]]
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(grad_input), grad_weight, grad_bias


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------


def _corners(ys: np.ndarray, xs: np.ndarray):
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    wy1 = ys - y0
    wx1 = xs - x0
    wy0 = 1.0 - wy1
    wx0 = 1.0 - wx1
    y0i = y0.astype(np.int64)
    x0i = x0.astype(np.int64)
    return y0i, x0i, (wy0, wy1), (wx0, wx1)


def _gather(x: np.ndarray, yi: np.ndarray, xi: np.ndarray) -> Tuple[np.ndarray, tuple, np.ndarray]:
    n, _, h, w = x.shape
    valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
    batch = np.arange(n).reshape((n,) + (1,) * (yi.ndim - 1))
    index = (batch, slice(None), np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1))
    # advanced indices around a slice put C last: (N, *S, C)
    values = x[index] * valid[..., None]
    return values, index, valid


def _check_points(x: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> None:
    if x.ndim != 4:
        raise ShapeError(f"bilinear_sample expects NCHW input, got {tuple(x.shape)}")
    if ys.shape != xs.shape or ys.shape[0] != x.shape[0]:
        raise ShapeError(f"sample points {tuple(ys.shape)}/{tuple(xs.shape)} do not match input {tuple(x.shape)}")


def bilinear_sample(x: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """
    Sample ``x`` at fractional (y, x) locations with zero padding outside.

    ``ys``/``xs`` have shape (N, *S); the result has shape (N, C, *S).
    """
    _check_points(x, ys, xs)
    y0, x0, (wy0, wy1), (wx0, wx1) = _corners(ys, xs)
    out = np.zeros(ys.shape + (x.shape[1],), dtype=np.result_type(x.dtype, ys.dtype))
    for dy, wy in ((0, wy0), (1, wy1)):
        for dx, wx in ((0, wx0), (1, wx1)):
            values, _, _ = _gather(x, y0 + dy, x0 + dx)
            out += (wy * wx)[..., None] * values
    return np.moveaxis(out, -1, 1)


def bilinear_sample_backward(
    x: np.ndarray, ys: np.ndarray, xs: np.ndarray, grad_out: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    _check_points(x, ys, xs)
    y0, x0, (wy0, wy1), (wx0, wx1) = _corners(ys, xs)
    grad_last = np.moveaxis(grad_out, 1, -1)
    grad_input = np.zeros_like(x, dtype=np.result_type(x.dtype, grad_out.dtype))
    values = {}
    for dy, wy in ((0, wy0), (1, wy1)):
        for dx, wx in ((0, wx0), (1, wx1)):
            corner, index, valid = _gather(x, y0 + dy, x0 + dx)
            values[(dy, dx)] = corner
            np.add.at(grad_input, index, grad_last * ((wy * wx) * valid)[..., None])
    d_y = (values[(1, 0)] - values[(0, 0)]) * wx0[..., None] + (values[(1, 1)] - values[(0, 1)]) * wx1[..., None]
    d_x = (values[(0, 1)] - values[(0, 0)]) * wy0[..., None] + (values[(1, 1)] - values[(1, 0)]) * wy1[..., None]
    grad_ys = (grad_last * d_y).sum(axis=-1)
    grad_xs = (grad_last * d_x).sum(axis=-1)
    return grad_input, grad_ys, grad_xs


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return grad * s * (1.0 - s)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return grad * (x > 0)


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return grad * s * (1.0 + x * (1.0 - s))


def hard_sigmoid(x: np.ndarray) -> np.ndarray:
    """max(0, min(1, (x + 1) / 2))"""
    return np.clip((x + 1.0) * 0.5, 0.0, 1.0)


def hard_sigmoid_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return grad * 0.5 * ((x > -1.0) & (x < 1.0))


def identity(x: np.ndarray) -> np.ndarray:
    return x


def identity_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return grad


Activation = Tuple[Callable[[np.ndarray], np.ndarray], Callable[[np.ndarray, np.ndarray], np.ndarray]]

ACTIVATIONS: Dict[str, Activation] = {
    "identity": (identity, identity_backward),
    "relu": (relu, relu_backward),
    "sigmoid": (sigmoid, sigmoid_backward),
    "silu": (silu, silu_backward),
    "hard_sigmoid": (hard_sigmoid, hard_sigmoid_backward),
}


def get_activation(name: str) -> Activation:
    if name not in ACTIVATIONS:
        raise ValueError(f"Unknown activation {name!r}")
    return ACTIVATIONS[name]


# ---------------------------------------------------------------------------
# pooling, normalization, resampling, channel plumbing
# ---------------------------------------------------------------------------


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    if x.ndim != 4 or x.shape[2] * x.shape[3] < 1:
        raise ShapeError(f"global_avg_pool expects non-empty NCHW input, got {tuple(x.shape)}")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(x_shape: Sequence[int], grad: np.ndarray) -> np.ndarray:
    n, c, h, w = x_shape
    return np.broadcast_to(grad[:, :, None, None] / (h * w), (n, c, h, w)).copy()


def layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Parameter-free normalization over axis 1."""
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps)


def layer_norm_backward(x: np.ndarray, grad: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    y = (x - mean) * inv_std
    g_mean = grad.mean(axis=1, keepdims=True)
    gy_mean = (grad * y).mean(axis=1, keepdims=True)
    return inv_std * (grad - g_mean - y * gy_mean)


def upsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return x
    return x.repeat(factor, axis=2).repeat(factor, axis=3)


def upsample_nearest_backward(grad: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return grad
    n, c, h, w = grad.shape
    return grad.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))


def avg_pool(x: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return x
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"avg_pool factor {factor} does not divide spatial extent {h}x{w}")
    return x.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))


def avg_pool_backward(grad: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return grad
    return upsample_nearest(grad, factor) / (factor * factor)


def concat_channels(arrays: Sequence[np.ndarray]) -> np.ndarray:
    spatial = {a.shape[2:] for a in arrays}
    if len(spatial) != 1:
        raise ShapeError(f"concat inputs disagree spatially: {[tuple(a.shape) for a in arrays]}")
    return np.concatenate(arrays, axis=1)


def split_channels(grad: np.ndarray, sizes: Sequence[int]) -> list[np.ndarray]:
    edges = np.cumsum(sizes)[:-1]
    return np.split(grad, edges, axis=1)


def ensure_finite(array: np.ndarray, location: str) -> None:
    if not np.all(np.isfinite(array)):
        bad = np.argwhere(~np.isfinite(array))[0]
        raise NumericError(f"non-finite value at index {tuple(int(i) for i in bad)}", location)
