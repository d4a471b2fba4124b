"""
Detection metrics: precision/recall at the operating point, all-points AP,
mAP@0.5 and mAP@0.5:0.95.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Mapping, Optional, Sequence

import numpy as np

from .data_handler import Box
from .postprocess import DEFAULT_CONF, Detection, iou_matrix
from .utils import format_record

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
MATCH_IOU = 0.5

GroundTruths = Mapping[Hashable, Sequence[Box]]


@dataclass
class ImageMatches:
    true_positives: int = 0
    false_positives: int = 0
    false_negatives: int = 0


@dataclass
class EvalResult:
    precision: Optional[float] = None
    recall: Optional[float] = None
    ap: Dict[float, Optional[float]] = field(default_factory=dict)
    map50: Optional[float] = None
    map50_95: Optional[float] = None
    per_class_ap: Dict[int, Optional[float]] = field(default_factory=dict)
    per_image: Dict[Hashable, ImageMatches] = field(default_factory=dict)
    num_detections: int = 0
    num_ground_truths: int = 0


def match_detections(
    detections: Sequence[Detection], ground_truths: GroundTruths, iou_threshold: float
) -> np.ndarray:
    """
    Greedy matching in descending score order (ties keep input order). Each
    detection takes the highest-IoU unmatched ground truth of its image and
    class at IoU >= threshold. Returns a true-positive flag per sorted detection.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    matched: Dict[Hashable, np.ndarray] = {
        image: np.zeros(len(boxes), dtype=bool) for image, boxes in ground_truths.items()
    }
    corners = {
        image: np.asarray([b.corners for b in boxes], dtype=np.float64).reshape(-1, 4)
        for image, boxes in ground_truths.items()
    }
    classes = {image: np.asarray([b.class_id for b in boxes]) for image, boxes in ground_truths.items()}
    flags = np.zeros(len(detections), dtype=bool)
    for rank, index in enumerate(order):
        det = detections[index]
        if det.image_id not in corners or not len(corners[det.image_id]):
            continue
        overlaps = iou_matrix(det.box, corners[det.image_id])[0]
        eligible = (classes[det.image_id] == det.class_id) & ~matched[det.image_id] & (overlaps >= iou_threshold)
        if not eligible.any():
            continue
        best = int(np.argmax(np.where(eligible, overlaps, -1.0)))
        matched[det.image_id][best] = True
        flags[rank] = True
    return flags


def _envelope_area(recall: np.ndarray, precision: np.ndarray) -> float:
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _count(ground_truths: GroundTruths, class_id: int | None) -> int:
    return sum(1 for boxes in ground_truths.values() for b in boxes if class_id is None or b.class_id == class_id)


def average_precision(
    detections: Sequence[Detection],
    ground_truths: GroundTruths,
    iou_threshold: float = MATCH_IOU,
    class_id: int | None = None,
) -> Optional[float]:
    """
    Area under the monotone precision-recall envelope. None when there are no
    ground truths to recall.
    """
    if class_id is not None:
        detections = [d for d in detections if d.class_id == class_id]
        ground_truths = {image: [b for b in boxes if b.class_id == class_id] for image, boxes in ground_truths.items()}
    total = _count(ground_truths, None)
    if total == 0:
        return None
    if not detections:
        return 0.0
    flags = match_detections(detections, ground_truths, iou_threshold)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    return _envelope_area(tp / total, tp / np.maximum(tp + fp, 1))


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def map_range(
    detections: Sequence[Detection],
    ground_truths: GroundTruths,
    conf_threshold: float = DEFAULT_CONF,
    match_iou: float = MATCH_IOU,
) -> EvalResult:
    classes = sorted({b.class_id for boxes in ground_truths.values() for b in boxes})
    result = EvalResult(num_detections=len(detections), num_ground_truths=_count(ground_truths, None))

    for threshold in IOU_THRESHOLDS:
        result.ap[threshold] = _mean([average_precision(detections, ground_truths, threshold, c) for c in classes])
    result.per_class_ap = {c: average_precision(detections, ground_truths, MATCH_IOU, c) for c in classes}
    if classes:
        result.map50 = result.ap[IOU_THRESHOLDS[0]] or 0.0
        result.map50_95 = _mean(list(result.ap.values())) or 0.0

    operating = [d for d in detections if d.score >= conf_threshold]
    flags = match_detections(operating, ground_truths, match_iou)
    tp = int(flags.sum())
    result.precision = tp / len(operating) if operating else None
    result.recall = tp / result.num_ground_truths if result.num_ground_truths else None

    order = sorted(range(len(operating)), key=lambda i: -operating[i].score)
    for image, boxes in ground_truths.items():
        result.per_image[image] = ImageMatches(false_negatives=len(boxes))
    for rank, index in enumerate(order):
        entry = result.per_image.setdefault(operating[index].image_id, ImageMatches())
        if flags[rank]:
            entry.true_positives += 1
            entry.false_negatives -= 1
        else:
            entry.false_positives += 1
    return result


class DetectionMetrics:
    """
    Accumulates per-image detections and ground truths, then evaluates the dataset.
    """

    def __init__(self, conf_threshold: float = DEFAULT_CONF) -> None:
        self.conf_threshold = conf_threshold
        self.detections: List[Detection] = []
        self.ground_truths: Dict[Hashable, List[Box]] = {}

    def add_image(self, image_id: Hashable, detections: Sequence[Detection], boxes: Sequence[Box]) -> None:
        self.ground_truths[image_id] = list(boxes)
        self.detections.extend(detections)

    def result(self) -> EvalResult:
        return map_range(self.detections, self.ground_truths, self.conf_threshold)


def _pct(value: Optional[float]) -> str:
    return "absent" if value is None else f"{100.0 * value:.2f}"


def format_eval_table(result: EvalResult) -> str:
    rows = [
        f"{'metric':<16} {'value/%':>8}",
        f"{'precision':<16} {_pct(result.precision):>8}",
        f"{'recall':<16} {_pct(result.recall):>8}",
        f"{'mAP@0.5':<16} {_pct(result.map50):>8}",
        f"{'mAP@0.5:0.95':<16} {_pct(result.map50_95):>8}",
    ]
    for class_id, ap in result.per_class_ap.items():
        rows.append(f"{'AP50 class ' + str(class_id):<16} {_pct(ap):>8}")
    rows.append(f"detections={result.num_detections} ground_truths={result.num_ground_truths}")
    return "\n".join(rows)


def eval_records(result: EvalResult) -> List[str]:
    lines = [
        format_record(
            kind="summary",
            precision=result.precision,
            recall=result.recall,
            map50=result.map50,
            map50_95=result.map50_95,
            detections=result.num_detections,
            ground_truths=result.num_ground_truths,
        )
    ]
    lines.extend(format_record(kind="ap", iou=threshold, ap=ap) for threshold, ap in result.ap.items())
    lines.extend(format_record(kind="class_ap", class_id=c, ap50=ap) for c, ap in result.per_class_ap.items())
    lines.extend(
        format_record(
            kind="image",
            image=image,
            tp=m.true_positives,
            fp=m.false_positives,
            fn=m.false_negatives,
        )
        for image, m in result.per_image.items()
    )
    return lines
