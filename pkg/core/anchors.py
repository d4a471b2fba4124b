"""
Anchor recomputation: k-means over box sizes with 1 - IoU as the distance.
"""

from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np

from .data_handler import AnnotatedImage
from .errors import DataError


def wh_iou(sizes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """IoU of centre-aligned boxes, (n, 2) sizes against (k, 2) anchors."""
    inter = np.minimum(sizes[:, None, 0], anchors[None, :, 0]) * np.minimum(sizes[:, None, 1], anchors[None, :, 1])
    union = (sizes[:, 0] * sizes[:, 1])[:, None] + (anchors[:, 0] * anchors[:, 1])[None, :] - inter
    return inter / union


def kmeans_anchors(
    box_sizes: Sequence[Tuple[float, float]], count: int = 6, seed: int = 0, iterations: int = 300
) -> np.ndarray:
    """``count`` anchors sorted by area; clusters are updated with the median size."""
    sizes = np.asarray(box_sizes, dtype=np.float64).reshape(-1, 2)
    sizes = sizes[(sizes > 0).all(axis=1)]
    if len(sizes) < count:
        raise DataError(f"need at least {count} boxes to fit {count} anchors, got {len(sizes)}")
    rng = np.random.default_rng(seed)
    anchors = sizes[rng.choice(len(sizes), size=count, replace=False)].copy()
    assignment = np.full(len(sizes), -1)
    for _ in range(iterations):
        nearest = np.argmax(wh_iou(sizes, anchors), axis=1)
        if np.array_equal(nearest, assignment):
            break
        assignment = nearest
        for k in range(count):
            members = sizes[assignment == k]
            if len(members):
                anchors[k] = np.median(members, axis=0)
    return anchors[np.argsort(anchors.prod(axis=1), kind="stable")]


def anchors_for_scales(anchors: np.ndarray, per_scale: int = 3) -> Tuple[Tuple[Tuple[float, float], ...], ...]:
    """Smallest anchors to the finest scale."""
    groups = []
    for start in range(0, len(anchors), per_scale):
        groups.append(tuple((round(float(w), 2), round(float(h), 2)) for w, h in anchors[start : start + per_scale]))
    return tuple(groups)


def box_sizes(images: Sequence[AnnotatedImage]) -> np.ndarray:
    sizes = [(box.width, box.height) for image in images for box in image.boxes]
    return np.asarray(sizes, dtype=np.float64).reshape(-1, 2)
