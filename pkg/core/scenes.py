"""
Synthetic infrared scenes: Gaussian point targets over a gradient, correlated
clutter and white-noise background.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, List, Tuple

import numpy as np

from .data_handler import AnnotatedImage, Box, ImageProvider
from .errors import DataError
from .utils import configure_logger, worker_count

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
PLACEMENT_ATTEMPTS = 200

logger = configure_logger("scenes")


@dataclass(frozen=True)
class SceneSpec:
    height: int = 256
    width: int = 256
    min_targets: int = 1
    max_targets: int = 3
    size_range: Tuple[int, int] = (2, 6)
    contrast: Tuple[float, float] = (0.25, 0.6)
    background_level: float = 0.2
    gradient: float = 0.1
    clutter: float = 0.04
    clutter_scale: float = 6.0
    noise: float = 0.01
    num_classes: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.height < 8 or self.width < 8:
            raise DataError(f"scene must be at least 8x8, got {self.height}x{self.width}")
        if not 0 <= self.min_targets <= self.max_targets:
            raise DataError(f"invalid target count range {self.min_targets}..{self.max_targets}")
        lo, hi = self.size_range
        if not 1 <= lo <= hi:
            raise DataError(f"invalid target size range {self.size_range}")
        if not 0.0 <= self.contrast[0] <= self.contrast[1] <= 1.0:
            raise DataError(f"invalid contrast range {self.contrast}")
        if not 0.0 <= self.background_level <= 1.0:
            raise DataError(f"background level must lie in [0, 1], got {self.background_level}")
        if min(self.gradient, self.clutter, self.noise, self.clutter_scale) < 0:
            raise DataError("background amplitudes must be non-negative")
        if self.num_classes < 1:
            raise DataError("num_classes must be at least 1")
        worst = self.max_targets * (box_extent(hi) + 1) ** 2
        if worst > self.height * self.width:
            raise DataError(
                f"{self.max_targets} targets of size {hi} cannot fit in a {self.height}x{self.width} scene"
            )

    def with_seed(self, seed: int) -> "SceneSpec":
        return replace(self, seed=seed)


def box_radius(size: int) -> int:
    """Pixels on each side of the centre at or above half of the peak."""
    return int(math.floor(size / 2.0))


def box_extent(size: int) -> int:
    return 2 * box_radius(size) + 1


def expected_area_fraction(spec: SceneSpec) -> float:
    """Mean total target-box area over image area for sizes and counts drawn uniformly."""
    lo, hi = spec.size_range
    mean_area = float(np.mean([box_extent(s) ** 2 for s in range(lo, hi + 1)]))
    mean_count = (spec.min_targets + spec.max_targets) / 2.0
    return mean_count * mean_area / (spec.height * spec.width)


def _smooth_noise(rng: np.random.Generator, height: int, width: int, scale: float) -> np.ndarray:
    field = rng.standard_normal((height, width))
    if scale <= 0:
        return field
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.rfftfreq(width)[None, :]
    transfer = np.exp(-2.0 * (math.pi * scale) ** 2 * (fy**2 + fx**2))
    smooth = np.fft.irfft2(np.fft.rfft2(field) * transfer, s=(height, width))
    std = smooth.std()
    return smooth / std if std > 0 else smooth


def synthesize_background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    background = np.full((h, w), spec.background_level, dtype=np.float64)
    if spec.gradient:
        angle = rng.uniform(0.0, 2.0 * math.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        ramp = (math.cos(angle) * (xx / max(w - 1, 1) - 0.5) + math.sin(angle) * (yy / max(h - 1, 1) - 0.5))
        background += spec.gradient * ramp
    if spec.clutter:
        background += spec.clutter * _smooth_noise(rng, h, w, spec.clutter_scale)
    if spec.noise:
        background += spec.noise * rng.standard_normal((h, w))
    return background


def _place(spec: SceneSpec, rng: np.random.Generator, sizes: List[int]) -> List[Tuple[int, int, int]]:
    placed: List[Tuple[int, int, int]] = []
    occupied = np.zeros((spec.height, spec.width), dtype=bool)
    for size in sizes:
        r = box_radius(size)
        for _ in range(PLACEMENT_ATTEMPTS):
            cy = int(rng.integers(r, spec.height - r))
            cx = int(rng.integers(r, spec.width - r))
            y0, y1 = max(cy - r - 1, 0), min(cy + r + 2, spec.height)
            x0, x1 = max(cx - r - 1, 0), min(cx + r + 2, spec.width)
            if not occupied[y0:y1, x0:x1].any():
                occupied[cy - r : cy + r + 1, cx - r : cx + r + 1] = True
                placed.append((cy, cx, size))
                break
        else:
            raise DataError(
                f"could not place {len(sizes)} non-overlapping targets in a {spec.height}x{spec.width} scene"
            )
    return placed


def synthesize_scene(spec: SceneSpec) -> AnnotatedImage:
    """
    Deterministic per seed. Each target is an isotropic Gaussian whose FWHM is
    its size, centred on a pixel; its box tightly encloses the pixels at or
    above half of the peak.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    background = synthesize_background(spec, rng)

    count = int(rng.integers(spec.min_targets, spec.max_targets + 1))
    lo, hi = spec.size_range
    sizes = [int(rng.integers(lo, hi + 1)) for _ in range(count)]
    placements = _place(spec, rng, sizes)

    image = background
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width]
    boxes: List[Box] = []
    for cy, cx, size in placements:
        contrast = float(rng.uniform(*spec.contrast))
        sigma = size * FWHM_TO_SIGMA
        image = image + contrast * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
        r = box_radius(size)
        class_id = int(rng.integers(0, spec.num_classes))
        boxes.append(Box(class_id, cx - r, cy - r, cx + r + 1, cy + r + 1))

    pixels = np.clip(image, 0.0, 1.0)
    return AnnotatedImage(pixels=pixels, boxes=boxes, source_id=f"synth-{spec.seed:06d}")


def synthesize_dataset(spec: SceneSpec, count: int, workers: int | None = None) -> List[AnnotatedImage]:
    """Scenes seeded ``spec.seed + i``, generated in parallel, returned in order."""
    spec.validate()
    seeds = [spec.seed + i for i in range(count)]
    with ThreadPoolExecutor(max_workers=worker_count(workers)) as pool:
        scenes = list(pool.map(lambda s: synthesize_scene(spec.with_seed(s)), seeds))
    logger.info("Synthesized %s scenes of %sx%s", count, spec.height, spec.width)
    return scenes


class SyntheticDataset(ImageProvider):
    """
    Deterministic on-the-fly scenes; frame ``i`` uses seed ``spec.seed + i``.
    """

    def __init__(self, spec: SceneSpec, length: int) -> None:
        spec.validate()
        self.spec = spec
        self.length = length
        self.cache: Dict[int, AnnotatedImage] = {}

    def __len__(self) -> int:
        return self.length

    def load(self, index: int) -> AnnotatedImage:
        if not 0 <= index < self.length:
            raise IndexError(index)
        if index not in self.cache:
            self.cache[index] = synthesize_scene(self.spec.with_seed(self.spec.seed + index))
        return self.cache[index]
