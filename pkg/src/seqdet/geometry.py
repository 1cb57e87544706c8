"""Bounding-box geometry: offset decoding, IoU, greedy per-class NMS.

Boxes come in two parameterizations.  ``BoxOffsets`` is what the model
regresses: top-left corner plus width and height, all as fractions of the
image size in [0, 1].  ``BoxXYXY`` is the evaluation-side corner form.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence


class BoxOffsets(NamedTuple):
    x_tl: float
    y_tl: float
    w: float
    h: float


class BoxXYXY(NamedTuple):
    x_min: float
    y_min: float
    x_max: float
    y_max: float


def decode_offsets(p) -> BoxXYXY:
    """(x_tl, y_tl, w, h) -> corner box, right/bottom clamped to 1."""
    x, y, w, h = (float(v) for v in p)
    return BoxXYXY(x, y, min(x + w, 1.0), min(y + h, 1.0))


def box_area(b: BoxXYXY) -> float:
    return max(0.0, b.x_max - b.x_min) * max(0.0, b.y_max - b.y_min)


def iou(a: BoxXYXY, b: BoxXYXY) -> float:
    """Intersection over union; 0 whenever the union has zero area."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = ix * iy if (ix > 0 and iy > 0) else 0.0
    union = box_area(a) + box_area(b) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def nms(detections: Sequence[tuple], iou_threshold: float) -> list[tuple]:
    """Greedy per-class NMS on (class_id, score, BoxXYXY) triples.

    Sorts by score descending (stable w.r.t. the input order on ties) and
    keeps a box iff its IoU with every already-kept box of the same class
    is below the threshold.  Output preserves score order.
    """
    ranked = sorted(range(len(detections)), key=lambda i: -detections[i][1])
    kept: list[tuple] = []
    for i in ranked:
        cls, score, box = detections[i]
        if all(iou(box, kb) < iou_threshold for kc, ks, kb in kept if kc == cls):
            kept.append((cls, score, box))
    return kept
