"""Binary object/background masks over feature-map grids.

A mask marks which cells of an H×W feature level fall inside ground-truth
boxes; everything else is background.  Masks drive the decoupled feature loss
and the analysis tooling, and are always recomputed on the fly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import as_boxes, box_area

# Canonical box side for a pyramid level is ``stride * LEVEL_BASE_SCALE``;
# level boundaries sit at the geometric mean of adjacent canonical sides.
LEVEL_BASE_SCALE = 2.0


@dataclass
class BinaryMask:
    """Per-level H×W indicator in {0, 1} with its stride metadata."""

    values: np.ndarray
    level: int = 0
    stride: int = 1

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {self.values.shape}")
        bad = ~np.isin(self.values, (0, 1))
        if bad.any():
            raise ValueError("mask values must be 0 or 1")
        self.values = self.values.astype(np.float64)

    @property
    def num_object_cells(self) -> int:
        return int(self.values.sum())

    @property
    def num_background_cells(self) -> int:
        return int(self.values.size - self.values.sum())

    def n_obj(self, channels: int) -> int:
        """Element count of the object region in a C-channel feature map."""
        return channels * self.num_object_cells

    def n_bg(self, channels: int) -> int:
        return channels * self.num_background_cells


def level_thresholds(strides, base_scale: float = LEVEL_BASE_SCALE) -> list[float]:
    """Box-side cutoffs between adjacent pyramid levels.

    Each level's canonical box side is ``stride * base_scale``; the cutoff
    between levels i and i+1 is the geometric mean of the two canonical
    sides, i.e. midway in log scale.
    """
    strides = list(strides)
    if strides != sorted(strides):
        raise ValueError("strides must be ascending")
    return [
        base_scale * float(np.sqrt(strides[i] * strides[i + 1]))
        for i in range(len(strides) - 1)
    ]


def assign_boxes_to_levels(boxes, strides, thresholds=None) -> list[np.ndarray]:
    """Partition boxes across pyramid levels by box scale.

    A box of area A goes to the first level whose threshold exceeds
    ``sqrt(A)``; boxes at or above the last threshold go to the final level.
    Every box lands on exactly one level.  ``thresholds`` overrides the
    defaults from :func:`level_thresholds`.
    """
    strides = list(strides)
    boxes = as_boxes(boxes) if np.size(boxes) else np.zeros((0, 4))
    if thresholds is None:
        thresholds = level_thresholds(strides)
    thresholds = [float(t) for t in np.atleast_1d(thresholds)]
    if len(thresholds) != len(strides) - 1:
        raise ValueError(
            f"need {len(strides) - 1} thresholds for {len(strides)} levels, "
            f"got {len(thresholds)}"
        )
    sides = np.sqrt(box_area(boxes))
    # side < thresholds[0] -> level 0, ..., side >= thresholds[-1] -> last.
    levels = np.searchsorted(np.asarray(thresholds), sides, side="right")
    return [boxes[levels == lv] for lv in range(len(strides))]


def make_gt_mask(boxes, H: int, W: int, stride: int, level: int = 0) -> BinaryMask:
    """Mark cells whose pixel-space center lies strictly inside any box.

    Cell (i, j) has center ``((j + 0.5) * stride, (i + 0.5) * stride)``;
    overlapping boxes merge by union.
    """
    inside = np.zeros((H, W), dtype=bool)
    boxes = as_boxes(boxes) if np.size(boxes) else np.zeros((0, 4))
    if boxes.shape[0]:
        cx = (np.arange(W, dtype=np.float64) + 0.5) * stride
        cy = (np.arange(H, dtype=np.float64) + 0.5) * stride
        for x0, y0, x1, y1 in boxes:
            inside_x = (cx > x0) & (cx < x1)
            inside_y = (cy > y0) & (cy < y1)
            inside |= inside_y[:, None] & inside_x[None, :]
    return BinaryMask(values=inside.astype(np.float64), level=level, stride=stride)


def make_random_mask(
    H: int, W: int, fg_fraction: float, seed, stride: int = 1, level: int = 0
) -> BinaryMask:
    """Uniformly random mask with exactly ``round(fg_fraction·H·W)`` ones.

    ``seed`` may be an int or a tuple of ints (SeedSequence entropy).
    """
    if not 0.0 <= fg_fraction <= 1.0:
        raise ValueError(f"fg_fraction must be in [0, 1], got {fg_fraction}")
    n_ones = int(round(fg_fraction * H * W))
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    flat = np.zeros(H * W, dtype=np.float64)
    if n_ones:
        flat[rng.choice(H * W, size=n_ones, replace=False)] = 1.0
    return BinaryMask(values=flat.reshape(H, W), level=level, stride=stride)


def make_all_one_mask(H: int, W: int, stride: int = 1, level: int = 0) -> BinaryMask:
    return BinaryMask(values=np.ones((H, W)), level=level, stride=stride)


def masks_for_image(boxes, feature_shapes, strides, thresholds=None) -> list[BinaryMask]:
    """Level-assign ``boxes`` and rasterise one GT mask per pyramid level.

    ``feature_shapes`` gives (H, W) per level, aligned with ``strides``.
    """
    per_level = assign_boxes_to_levels(boxes, strides, thresholds=thresholds)
    out = []
    for lv, ((H, W), stride, lv_boxes) in enumerate(
        zip(feature_shapes, strides, per_level)
    ):
        out.append(make_gt_mask(lv_boxes, H, W, stride, level=lv))
    return out
