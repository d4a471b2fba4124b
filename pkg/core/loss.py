"""
YOLOv5-style detection loss: CIoU box term, BCE objectness with CIoU soft
labels, BCE classification. Gradients with respect to the raw prediction
maps are computed analytically alongside the forward value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from config.settings import ModelConfig

from .errors import ShapeError
from .tensor import sigmoid

ANCHOR_RATIO_THRESHOLD = 4.0
NEIGHBOUR_MARGIN = 0.5
CIOU_EPS = 1e-7
_V_SCALE = 4.0 / math.pi**2


@dataclass
class LossWeights:
    box: float = 0.05
    obj: float = 1.0
    cls: float = 0.5
    balance: Tuple[float, ...] = (4.0, 1.0)
    # share of the objectness target taken from the matched CIoU; 0 gives hard labels
    iou_ratio: float = 1.0


@dataclass
class ScaleTargets:
    image: np.ndarray
    anchor: np.ndarray
    gj: np.ndarray
    gi: np.ndarray
    tbox: np.ndarray
    cls: np.ndarray
    anchor_wh: np.ndarray

    @property
    def count(self) -> int:
        return int(self.image.size)


@dataclass
class LossResult:
    total: float
    box: float
    obj: float
    cls: float
    grads: List[np.ndarray] = field(default_factory=list)
    matches: int = 0

    def components(self) -> dict:
        return {"loss": self.total, "box": self.box, "obj": self.obj, "cls": self.cls}


def _split_map(raw: np.ndarray, anchors: int) -> np.ndarray:
    n, channels, h, w = raw.shape
    if channels % anchors:
        raise ShapeError(f"prediction map has {channels} channels, not a multiple of {anchors} anchors")
    return raw.reshape(n, anchors, channels // anchors, h, w)


def targets_array(targets: Sequence[np.ndarray]) -> np.ndarray:
    """Stack per-image (k, 5) [class, cx, cy, w, h] arrays into (n, 6) rows prefixed by image index."""
    rows = []
    for index, boxes in enumerate(targets):
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
        if boxes.size:
            rows.append(np.concatenate([np.full((boxes.shape[0], 1), index, dtype=np.float64), boxes], axis=1))
    if not rows:
        return np.zeros((0, 6), dtype=np.float64)
    return np.concatenate(rows, axis=0)


def build_targets(
    shapes: Sequence[Tuple[int, int]], targets: Sequence[np.ndarray], config: ModelConfig
) -> List[ScaleTargets]:
    """
    Assign each normalized target to anchors whose width and height ratios are
    within 4x, in its own cell and the two nearest neighbouring cells.
    """
    table = targets_array(targets)
    assigned: List[ScaleTargets] = []
    for (h, w), stride, anchor_set in zip(shapes, config.strides, config.anchors):
        anchors = np.asarray(anchor_set, dtype=np.float64) / stride
        rows: List[Tuple[int, int, int, int, float, float, float, float, int]] = []
        for image, cls, cx, cy, bw, bh in table:
            gx, gy, gw, gh = cx * w, cy * h, bw * w, bh * h
            if gw <= 0 or gh <= 0:
                continue
            cells = [(0.0, 0.0)]
            fx, fy = gx % 1.0, gy % 1.0
            ix, iy = w - gx, h - gy
            if fx < NEIGHBOUR_MARGIN and gx > 1.0:
                cells.append((NEIGHBOUR_MARGIN, 0.0))
            if fy < NEIGHBOUR_MARGIN and gy > 1.0:
                cells.append((0.0, NEIGHBOUR_MARGIN))
            if ix % 1.0 < NEIGHBOUR_MARGIN and ix > 1.0:
                cells.append((-NEIGHBOUR_MARGIN, 0.0))
            if iy % 1.0 < NEIGHBOUR_MARGIN and iy > 1.0:
                cells.append((0.0, -NEIGHBOUR_MARGIN))
            for a, (aw, ah) in enumerate(anchors):
                ratio = max(gw / aw, aw / gw, gh / ah, ah / gh)
                if ratio >= ANCHOR_RATIO_THRESHOLD:
                    continue
                for ox, oy in cells:
                    gi = int(np.clip(math.floor(gx - ox), 0, w - 1))
                    gj = int(np.clip(math.floor(gy - oy), 0, h - 1))
                    rows.append((int(image), a, gj, gi, gx - gi, gy - gj, gw, gh, int(cls)))
        if rows:
            data = np.asarray(rows, dtype=np.float64)
            assigned.append(
                ScaleTargets(
                    image=data[:, 0].astype(np.int64),
                    anchor=data[:, 1].astype(np.int64),
                    gj=data[:, 2].astype(np.int64),
                    gi=data[:, 3].astype(np.int64),
                    tbox=data[:, 4:8],
                    cls=data[:, 8].astype(np.int64),
                    anchor_wh=anchors[data[:, 1].astype(np.int64)],
                )
            )
        else:
            empty = np.zeros(0, dtype=np.int64)
            assigned.append(
                ScaleTargets(empty, empty, empty, empty, np.zeros((0, 4)), empty, np.zeros((0, 2)))
            )
    return assigned


# ---------------------------------------------------------------------------
# CIoU
# ---------------------------------------------------------------------------


def ciou(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Complete IoU of centre-format boxes, rows of (x, y, w, h)."""
    value, _ = ciou_with_grad(pred, target)
    return value


def ciou_with_grad(pred: np.ndarray, target: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """CIoU and its gradient with respect to ``pred`` (target held fixed)."""
    px, py, pw, ph = (pred[:, i] for i in range(4))
    tx, ty, tw, th = (target[:, i] for i in range(4))
    ax1, ax2, ay1, ay2 = px - pw / 2, px + pw / 2, py - ph / 2, py + ph / 2
    bx1, bx2, by1, by2 = tx - tw / 2, tx + tw / 2, ty - th / 2, ty + th / 2

    raw_w = np.minimum(ax2, bx2) - np.maximum(ax1, bx1)
    raw_h = np.minimum(ay2, by2) - np.maximum(ay1, by1)
    iw, ih = np.clip(raw_w, 0.0, None), np.clip(raw_h, 0.0, None)
    inter = iw * ih
    union = pw * ph + tw * th - inter + CIOU_EPS
    iou = inter / union

    cw = np.maximum(ax2, bx2) - np.minimum(ax1, bx1)
    ch = np.maximum(ay2, by2) - np.minimum(ay1, by1)
    c2 = cw**2 + ch**2 + CIOU_EPS
    rho2 = (px - tx) ** 2 + (py - ty) ** 2

    ph_e, th_e = ph + CIOU_EPS, th + CIOU_EPS
    diff = np.arctan(tw / th_e) - np.arctan(pw / ph_e)
    v = _V_SCALE * diff**2
    s = v - iou + 1.0 + CIOU_EPS
    alpha = v / s
    value = iou - (rho2 / c2 + v * alpha)

    # d value / d iou, d value / d v
    g_iou = 1.0 - (v / s) ** 2
    g_v = -(2.0 * v / s - (v / s) ** 2)

    g_inter = g_iou * (union + inter) / union**2
    g_area = -g_iou * inter / union**2
    open_w = raw_w > 0
    open_h = raw_h > 0
    g_iw = g_inter * ih * open_w
    g_ih = g_inter * iw * open_h
    g_ax2 = g_iw * (ax2 < bx2)
    g_ax1 = -g_iw * (ax1 > bx1)
    g_ay2 = g_ih * (ay2 < by2)
    g_ay1 = -g_ih * (ay1 > by1)

    g_c2 = rho2 / c2**2
    g_cw = g_c2 * 2.0 * cw
    g_ch = g_c2 * 2.0 * ch
    g_ax2 += g_cw * (ax2 > bx2)
    g_ax1 -= g_cw * (ax1 < bx1)
    g_ay2 += g_ch * (ay2 > by2)
    g_ay1 -= g_ch * (ay1 < by1)

    g_px = g_ax1 + g_ax2 - 2.0 * (px - tx) / c2
    g_py = g_ay1 + g_ay2 - 2.0 * (py - ty) / c2
    denom = pw**2 + ph_e**2
    g_pw = (g_ax2 - g_ax1) / 2 + g_area * ph + g_v * (-2.0 * _V_SCALE * diff * ph_e / denom)
    g_ph = (g_ay2 - g_ay1) / 2 + g_area * pw + g_v * (2.0 * _V_SCALE * diff * pw / denom)
    return value, np.stack([g_px, g_py, g_pw, g_ph], axis=1)


# ---------------------------------------------------------------------------
# BCE with logits
# ---------------------------------------------------------------------------


def bce_with_logits(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    return np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))


def bce_with_logits_grad(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    return sigmoid(logits) - targets


# ---------------------------------------------------------------------------
# total loss
# ---------------------------------------------------------------------------


def compute_loss(
    predictions: Sequence[np.ndarray],
    targets: Sequence[np.ndarray],
    config: ModelConfig,
    weights: LossWeights | None = None,
) -> LossResult:
    """
    ``targets`` holds one (k, 5) array per image: class, cx, cy, w, h, normalized.
    The returned ``grads`` are d(total)/d(raw map), one per prediction scale.
    """
    weights = weights or LossWeights()
    if len(predictions) != len(config.strides):
        raise ShapeError(f"expected {len(config.strides)} prediction maps, got {len(predictions)}")
    batch = predictions[0].shape[0]
    if len(targets) != batch:
        raise ShapeError(f"{len(targets)} target lists for a batch of {batch}")

    nc = config.num_classes
    na = config.anchors_per_scale
    shapes = [tuple(p.shape[2:]) for p in predictions]
    assigned = build_targets(shapes, targets, config)

    box_loss = obj_loss = cls_loss = 0.0
    grads: List[np.ndarray] = []
    matches = 0
    for raw, scale, balance in zip(predictions, assigned, weights.balance):
        view = _split_map(raw.astype(np.float64, copy=False), na)
        grad = np.zeros_like(view)
        tobj = np.zeros(view[:, :, 4].shape, dtype=np.float64)

        if scale.count:
            matches += scale.count
            ps = view[scale.image, scale.anchor, :, scale.gj, scale.gi]
            sxy = sigmoid(ps[:, 0:2])
            swh = sigmoid(ps[:, 2:4])
            pxy = 2.0 * sxy - 0.5
            pwh = (2.0 * swh) ** 2 * scale.anchor_wh
            pbox = np.concatenate([pxy, pwh], axis=1)
            score, g_box = ciou_with_grad(pbox, scale.tbox)
            box_loss += float(np.mean(1.0 - score))

            coef = -batch * weights.box / scale.count
            g_logit = np.zeros_like(ps)
            g_logit[:, 0:2] = coef * g_box[:, 0:2] * 2.0 * sxy * (1.0 - sxy)
            g_logit[:, 2:4] = coef * g_box[:, 2:4] * 8.0 * swh * swh * (1.0 - swh) * scale.anchor_wh

            soft = (1.0 - weights.iou_ratio) + weights.iou_ratio * np.clip(score, 0.0, None)
            order = np.argsort(soft, kind="stable")
            tobj[scale.image[order], scale.anchor[order], scale.gj[order], scale.gi[order]] = soft[order]

            if nc > 1:
                tcls = np.zeros((scale.count, nc), dtype=np.float64)
                tcls[np.arange(scale.count), scale.cls] = 1.0
                logits = ps[:, 5:]
                cls_loss += float(np.mean(bce_with_logits(logits, tcls)))
                g_logit[:, 5:] = batch * weights.cls * bce_with_logits_grad(logits, tcls) / tcls.size

            np.add.at(grad, (scale.image, scale.anchor, slice(None), scale.gj, scale.gi), g_logit)

        obj_logits = view[:, :, 4]
        obj_loss += balance * float(np.mean(bce_with_logits(obj_logits, tobj)))
        grad[:, :, 4] += batch * weights.obj * balance * bce_with_logits_grad(obj_logits, tobj) / tobj.size
        grads.append(grad.reshape(raw.shape).astype(raw.dtype, copy=False))

    box_term = box_loss * weights.box * batch
    obj_term = obj_loss * weights.obj * batch
    cls_term = cls_loss * weights.cls * batch
    return LossResult(
        total=box_term + obj_term + cls_term,
        box=box_term,
        obj=obj_term,
        cls=cls_term,
        grads=grads,
        matches=matches,
    )
