"""Axis-aligned box geometry in pixel coordinates.

Boxes are ``(x0, y0, x1, y1)`` float arrays with half-open extent: the box
covers the pixel area ``[x0, x1) x [y0, y1)`` so width is ``x1 - x0`` with no
"+1" convention anywhere.
"""

from __future__ import annotations

import numpy as np

# Regression targets are clamped to this magnitude before exponentiation so a
# wild prediction cannot overflow to an astronomically large box.
DELTA_CLAMP = 4.0


def as_boxes(a) -> np.ndarray:
    """Coerce to a float64 ``(N, 4)`` array, accepting a single box too."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != 4:
        raise ValueError(f"expected boxes of shape (N, 4), got {a.shape}")
    return a


def box_area(boxes) -> np.ndarray:
    boxes = as_boxes(boxes)
    w = np.clip(boxes[:, 2] - boxes[:, 0], 0.0, None)
    h = np.clip(boxes[:, 3] - boxes[:, 1], 0.0, None)
    return w * h


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between two box sets, shape ``(len(a), len(b))``.

    Degenerate (zero-area) boxes have IoU 0 with everything.
    """
    a = as_boxes(a)
    b = as_boxes(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    x0 = np.maximum(a[:, None, 0], b[None, :, 0])
    y0 = np.maximum(a[:, None, 1], b[None, :, 1])
    x1 = np.minimum(a[:, None, 2], b[None, :, 2])
    y1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x1 - x0, 0.0, None) * np.clip(y1 - y0, 0.0, None)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0.0, inter / union, 0.0)
    return iou


def clip_boxes(boxes, image_size: int) -> np.ndarray:
    boxes = as_boxes(boxes).copy()
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, float(image_size))
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, float(image_size))
    return boxes


def _centers_sizes(boxes):
    boxes = as_boxes(boxes)
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    cx = boxes[:, 0] + 0.5 * w
    cy = boxes[:, 1] + 0.5 * h
    return cx, cy, w, h


def encode_deltas(anchors, targets) -> np.ndarray:
    """Standard ``(dx, dy, dw, dh)`` parameterisation of ``targets`` w.r.t.
    ``anchors``: translations normalised by anchor size, log-ratio scales.
    """
    acx, acy, aw, ah = _centers_sizes(anchors)
    tcx, tcy, tw, th = _centers_sizes(targets)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("anchors must have positive width and height")
    if np.any(tw <= 0) or np.any(th <= 0):
        raise ValueError("target boxes must have positive width and height")
    dx = (tcx - acx) / aw
    dy = (tcy - acy) / ah
    dw = np.log(tw / aw)
    dh = np.log(th / ah)
    return np.stack([dx, dy, dw, dh], axis=1)


def decode_deltas(anchors, deltas) -> np.ndarray:
    """Invert :func:`encode_deltas`; scale deltas clamped to ``±DELTA_CLAMP``."""
    anchors = as_boxes(anchors)
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.ndim == 1:
        deltas = deltas[None, :]
    if deltas.shape != anchors.shape:
        raise ValueError(
            f"deltas shape {deltas.shape} does not match anchors {anchors.shape}"
        )
    acx, acy, aw, ah = _centers_sizes(anchors)
    dx, dy = deltas[:, 0], deltas[:, 1]
    dw = np.clip(deltas[:, 2], -DELTA_CLAMP, DELTA_CLAMP)
    dh = np.clip(deltas[:, 3], -DELTA_CLAMP, DELTA_CLAMP)
    cx = acx + dx * aw
    cy = acy + dy * ah
    w = aw * np.exp(dw)
    h = ah * np.exp(dh)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def nms(boxes, scores, iou_threshold: float) -> np.ndarray:
    """Greedy non-maximum suppression, deterministic under score ties.

    Candidates are visited in order of decreasing score, breaking ties by
    ascending input index, and a candidate is dropped when its IoU with an
    already kept box strictly exceeds ``iou_threshold``.  Returns kept indices
    in visiting order.
    """
    boxes = as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (boxes.shape[0],):
        raise ValueError("scores must be one per box")
    order = np.lexsort((np.arange(len(scores)), -scores))
    keep = []
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(scores), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_threshold
    return np.asarray(keep, dtype=np.int64)
