"""
Raw prediction maps to detections: sigmoid decode, confidence filter, greedy NMS.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, List, Sequence, Tuple

import numpy as np

from config.settings import ModelConfig

from .tensor import sigmoid

DEFAULT_CONF = 0.15
DEFAULT_NMS_IOU = 0.45
DEFAULT_MAX_DET = 300

BoxTuple = Tuple[float, float, float, float]


@dataclass(slots=True)
class Detection:
    box: BoxTuple
    score: float
    class_id: int = 0
    image_id: Hashable = 0

    def __post_init__(self) -> None:
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"detection box must be well-ordered, got {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score must lie in [0, 1], got {self.score}")


def decode_arrays(
    raw: np.ndarray, stride: int, anchors: Sequence[Tuple[float, float]], num_classes: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Decode one raw map (N, A*(5+nc), H, W) into pixel corner boxes (N, A*H*W, 4),
    scores (N, A*H*W) and class ids (N, A*H*W), ordered anchor, row, column.
    """
    n, _, h, w = raw.shape
    na = len(anchors)
    view = raw.astype(np.float64, copy=False).reshape(n, na, 5 + num_classes, h, w)
    s = sigmoid(view)
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    anchor_wh = np.asarray(anchors, dtype=np.float64).reshape(1, na, 2, 1, 1)
    cx = (2.0 * s[:, :, 0] - 0.5 + gx) * stride
    cy = (2.0 * s[:, :, 1] - 0.5 + gy) * stride
    wh = (2.0 * s[:, :, 2:4]) ** 2 * anchor_wh
    boxes = np.stack([cx - wh[:, :, 0] / 2, cy - wh[:, :, 1] / 2, cx + wh[:, :, 0] / 2, cy + wh[:, :, 1] / 2], axis=-1)

    obj = s[:, :, 4]
    if num_classes == 1:
        scores = obj
        classes = np.zeros_like(obj, dtype=np.int64)
    else:
        cls = s[:, :, 5:]
        classes = cls.argmax(axis=2)
        scores = obj * np.take_along_axis(cls, classes[:, :, None], axis=2)[:, :, 0]
    return boxes.reshape(n, -1, 4), scores.reshape(n, -1), classes.reshape(n, -1)


def decode(
    predictions: Sequence[np.ndarray],
    config: ModelConfig,
    conf_threshold: float = DEFAULT_CONF,
    image_ids: Sequence[Hashable] | None = None,
) -> List[List[Detection]]:
    """Per-image detections with score >= ``conf_threshold``."""
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError(f"conf_threshold must lie in [0, 1], got {conf_threshold}")
    batch = predictions[0].shape[0]
    ids = list(image_ids) if image_ids is not None else list(range(batch))
    results: List[List[Detection]] = [[] for _ in range(batch)]
    for raw, stride, anchors in zip(predictions, config.strides, config.anchors):
        boxes, scores, classes = decode_arrays(raw, stride, anchors, config.num_classes)
        for b in range(batch):
            keep = (scores[b] >= conf_threshold) & (boxes[b, :, 2] > boxes[b, :, 0]) & (boxes[b, :, 3] > boxes[b, :, 1])
            for index in np.flatnonzero(keep):
                results[b].append(
                    Detection(
                        box=tuple(float(v) for v in boxes[b, index]),
                        score=float(scores[b, index]),
                        class_id=int(classes[b, index]),
                        image_id=ids[b],
                    )
                )
    return results


def iou(a: BoxTuple, b: BoxTuple) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (n, 4) and (m, 4) corner boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0.0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0.0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def nms(
    detections: Sequence[Detection],
    iou_threshold: float = DEFAULT_NMS_IOU,
    class_agnostic: bool = False,
    max_det: int = DEFAULT_MAX_DET,
) -> List[Detection]:
    """
    Greedy suppression in descending score order (ties keep input order).
    A box is suppressed when its IoU with a kept box of the same class exceeds
    ``iou_threshold``.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in [0, 1], got {iou_threshold}")
    if not detections:
        return []
    boxes = np.asarray([d.box for d in detections], dtype=np.float64)
    scores = np.asarray([d.score for d in detections], dtype=np.float64)
    classes = np.asarray([d.class_id for d in detections])
    order = np.argsort(-scores, kind="stable")
    suppressed = np.zeros(len(detections), dtype=bool)
    keep: List[int] = []
    for index in order:
        if suppressed[index]:
            continue
        keep.append(int(index))
        if len(keep) >= max_det:
            break
        overlap = iou_matrix(boxes[index], boxes)[0] > iou_threshold
        if not class_agnostic:
            overlap &= classes == classes[index]
        suppressed |= overlap
    return [detections[i] for i in keep]


def postprocess(
    predictions: Sequence[np.ndarray],
    config: ModelConfig,
    conf_threshold: float = DEFAULT_CONF,
    iou_threshold: float = DEFAULT_NMS_IOU,
    class_agnostic: bool = False,
    max_det: int = DEFAULT_MAX_DET,
    image_ids: Sequence[Hashable] | None = None,
) -> List[List[Detection]]:
    return [
        nms(per_image, iou_threshold, class_agnostic, max_det)
        for per_image in decode(predictions, config, conf_threshold, image_ids)
    ]
