"""
Box-consistent augmentations. Geometric ops map continuous (y, x) points,
pixel centres sitting at ``index + 0.5``; boxes follow the same map, are
clipped to the frame and dropped below 1 px of area.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Type

import numpy as np

from .data_handler import AnnotatedImage, Box

MIN_BOX_AREA = 1.0


class Augmentation(Protocol):
    name: str

    def apply(self, image: AnnotatedImage, rng: np.random.Generator | None = None) -> AnnotatedImage:
        ...

    def map_point(self, y: float, x: float, shape: Tuple[int, int]) -> Tuple[float, float]:
        ...


def _clip_boxes(boxes: Sequence[Tuple[int, float, float, float, float]], height: int, width: int) -> List[Box]:
    kept: List[Box] = []
    for class_id, x1, y1, x2, y2 in boxes:
        x1, x2 = sorted((float(np.clip(x1, 0, width)), float(np.clip(x2, 0, width))))
        y1, y2 = sorted((float(np.clip(y1, 0, height)), float(np.clip(y2, 0, height))))
        if (x2 - x1) * (y2 - y1) >= MIN_BOX_AREA and x1 < x2 and y1 < y2:
            kept.append(Box(class_id, x1, y1, x2, y2))
    return kept


class _Geometric:
    name = "geometric"

    def map_point(self, y: float, x: float, shape: Tuple[int, int]) -> Tuple[float, float]:
        raise NotImplementedError

    def warp(self, pixels: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def apply(self, image: AnnotatedImage, rng: np.random.Generator | None = None) -> AnnotatedImage:
        shape = image.pixels.shape
        moved = []
        for box in image.boxes:
            ya, xa = self.map_point(box.y1, box.x1, shape)
            yb, xb = self.map_point(box.y2, box.x2, shape)
            moved.append((box.class_id, xa, ya, xb, yb))
        return image.replace(pixels=self.warp(image.pixels), boxes=_clip_boxes(moved, *shape))


@dataclass(frozen=True)
class HFlip(_Geometric):
    name = "hflip"

    def map_point(self, y: float, x: float, shape: Tuple[int, int]) -> Tuple[float, float]:
        return y, shape[1] - x

    def warp(self, pixels: np.ndarray) -> np.ndarray:
        return pixels[:, ::-1].copy()


@dataclass(frozen=True)
class VFlip(_Geometric):
    name = "vflip"

    def map_point(self, y: float, x: float, shape: Tuple[int, int]) -> Tuple[float, float]:
        return shape[0] - y, x

    def warp(self, pixels: np.ndarray) -> np.ndarray:
        return pixels[::-1, :].copy()


@dataclass(frozen=True)
class Translate(_Geometric):
    """Integer shift; uncovered pixels take the frame's mean."""

    dy: int = 0
    dx: int = 0
    name = "translate"

    def map_point(self, y: float, x: float, shape: Tuple[int, int]) -> Tuple[float, float]:
        return y + self.dy, x + self.dx

    def warp(self, pixels: np.ndarray) -> np.ndarray:
        h, w = pixels.shape
        out = np.full_like(pixels, pixels.mean())
        src_y = slice(max(0, -self.dy), min(h, h - self.dy))
        src_x = slice(max(0, -self.dx), min(w, w - self.dx))
        dst_y = slice(max(0, self.dy), min(h, h + self.dy))
        dst_x = slice(max(0, self.dx), min(w, w + self.dx))
        if src_y.start < src_y.stop and src_x.start < src_x.stop:
            out[dst_y, dst_x] = pixels[src_y, src_x]
        return out


@dataclass(frozen=True)
class Scale(_Geometric):
    """Zoom about the frame centre, same output size, nearest sampling."""

    factor: float = 1.0
    name = "scale"

    def __post_init__(self) -> None:
        if self.factor <= 0:
            raise ValueError(f"scale factor must be positive, got {self.factor}")

    def map_point(self, y: float, x: float, shape: Tuple[int, int]) -> Tuple[float, float]:
        h, w = shape
        return (y - h / 2) * self.factor + h / 2, (x - w / 2) * self.factor + w / 2

    def warp(self, pixels: np.ndarray) -> np.ndarray:
        h, w = pixels.shape
        rows = np.floor((np.arange(h) + 0.5 - h / 2) / self.factor + h / 2).astype(int)
        cols = np.floor((np.arange(w) + 0.5 - w / 2) / self.factor + w / 2).astype(int)
        inside = (rows[:, None] >= 0) & (rows[:, None] < h) & (cols[None, :] >= 0) & (cols[None, :] < w)
        out = np.full_like(pixels, pixels.mean())
        sampled = pixels[np.clip(rows, 0, h - 1)[:, None], np.clip(cols, 0, w - 1)[None, :]]
        out[inside] = sampled[inside]
        return out


@dataclass(frozen=True)
class Brightness:
    gain: float = 1.0
    offset: float = 0.0
    name = "brightness"

    def map_point(self, y: float, x: float, shape: Tuple[int, int]) -> Tuple[float, float]:
        return y, x

    def apply(self, image: AnnotatedImage, rng: np.random.Generator | None = None) -> AnnotatedImage:
        return image.replace(pixels=np.clip(image.pixels * self.gain + self.offset, 0.0, 1.0))


@dataclass(frozen=True)
class Noise:
    sigma: float = 0.01
    name = "noise"

    def map_point(self, y: float, x: float, shape: Tuple[int, int]) -> Tuple[float, float]:
        return y, x

    def apply(self, image: AnnotatedImage, rng: np.random.Generator | None = None) -> AnnotatedImage:
        rng = rng or np.random.default_rng(0)
        noisy = image.pixels + self.sigma * rng.standard_normal(image.pixels.shape)
        return image.replace(pixels=np.clip(noisy, 0.0, 1.0))


AUGMENTATIONS: Dict[str, Type] = {
    "hflip": HFlip,
    "vflip": VFlip,
    "translate": Translate,
    "scale": Scale,
    "brightness": Brightness,
    "noise": Noise,
}


def augment(
    image: AnnotatedImage, ops: Sequence[Augmentation], rng: Optional[np.random.Generator] = None
) -> AnnotatedImage:
    for op in ops:
        if op.name not in AUGMENTATIONS:
            raise ValueError(f"unknown augmentation {op.name!r}")
        image = op.apply(image, rng)
    return image


def map_point_chain(
    ops: Sequence[Augmentation], y: float, x: float, shape: Tuple[int, int]
) -> Tuple[float, float]:
    for op in ops:
        y, x = op.map_point(y, x, shape)
    return y, x


def random_augmentations(rng: np.random.Generator, shape: Tuple[int, int] = (256, 256)) -> List[Augmentation]:
    """Training-time chain: flips, a shift up to 10% of the frame, zoom 0.8-1.25, photometric jitter."""
    h, w = shape
    ops: List[Augmentation] = []
    if rng.random() < 0.5:
        ops.append(HFlip())
    if rng.random() < 0.5:
        ops.append(VFlip())
    if rng.random() < 0.5:
        ops.append(Translate(dy=int(rng.integers(-h // 10, h // 10 + 1)), dx=int(rng.integers(-w // 10, w // 10 + 1))))
    if rng.random() < 0.3:
        ops.append(Scale(factor=float(np.exp(rng.uniform(np.log(0.8), np.log(1.25))))))
    if rng.random() < 0.5:
        ops.append(Brightness(gain=float(rng.uniform(0.8, 1.2)), offset=float(rng.uniform(-0.05, 0.05))))
    if rng.random() < 0.3:
        ops.append(Noise(sigma=float(rng.uniform(0.0, 0.02))))
    return ops
