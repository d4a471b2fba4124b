"""
Dataset evaluation: batched inference, decode + NMS per image, metric reduction.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Sequence

from .data_handler import AnnotatedImage, collate
from .detnet import Detector
from .metrics import DetectionMetrics, EvalResult
from .postprocess import DEFAULT_CONF, DEFAULT_MAX_DET, DEFAULT_NMS_IOU, Detection, decode, nms
from .utils import configure_logger, worker_count

logger = configure_logger("evaluation")


@dataclass
class EvaluationRun:
    result: EvalResult
    detections: List[List[Detection]] = field(default_factory=list)


def detect_images(
    model: Detector,
    images: Sequence[AnnotatedImage],
    conf_threshold: float = DEFAULT_CONF,
    iou_threshold: float = DEFAULT_NMS_IOU,
    batch_size: int = 8,
    class_agnostic: bool = False,
    max_det: int = DEFAULT_MAX_DET,
    workers: int | None = None,
) -> List[List[Detection]]:
    """Detections per image, in input order, tagged with the image's position."""
    detections: List[List[Detection]] = []
    with ThreadPoolExecutor(max_workers=worker_count(workers)) as pool:
        for start in range(0, len(images), batch_size):
            chunk = images[start : start + batch_size]
            batch, _ = collate(chunk)
            outputs = model.predict(batch)
            ids = list(range(start, start + len(chunk)))
            decoded = decode(outputs, model.config, conf_threshold, image_ids=ids)
            detections.extend(pool.map(lambda dets: nms(dets, iou_threshold, class_agnostic, max_det), decoded))
    return detections


def evaluate_images(
    model: Detector,
    images: Sequence[AnnotatedImage],
    conf_threshold: float = DEFAULT_CONF,
    iou_threshold: float = DEFAULT_NMS_IOU,
    batch_size: int = 8,
    class_agnostic: bool = False,
    workers: int | None = None,
) -> EvaluationRun:
    """
    AP curves use every detection that survives decode at a low floor, the
    operating-point precision and recall use ``conf_threshold``.
    """
    if not images:
        logger.warning("Evaluating an empty image set")
        return EvaluationRun(result=DetectionMetrics(conf_threshold).result())
    detections = detect_images(
        model,
        images,
        conf_threshold=min(conf_threshold, 0.001),
        iou_threshold=iou_threshold,
        batch_size=batch_size,
        class_agnostic=class_agnostic,
        workers=workers,
    )
    metrics = DetectionMetrics(conf_threshold)
    for index, (image, found) in enumerate(zip(images, detections)):
        metrics.add_image(index, found, image.boxes)
    return EvaluationRun(result=metrics.result(), detections=detections)
