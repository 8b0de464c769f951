"""Canned configurations for the desk-scale benchmark.

The wide/narrow pair mirrors the usual teacher/student setup: the student's
backbone is roughly a third of the teacher's width per stage while both share
the same neck width, anchor grid, and head geometry, so teacher proposals and
features are directly comparable.
"""

from __future__ import annotations

from .data import DatasetSpec
from .detector import DetectorConfig, _anchor_pairs


def desk_anchors():
    """Anchor scales matched to the 10–28 px desk box-size range."""
    return (_anchor_pairs((10, 16)), _anchor_pairs((26, 34)))


def wide_config(image_size: int = 64) -> DetectorConfig:
    return DetectorConfig(
        backbone_widths=(32, 48, 64, 96),
        neck_channels=48,
        anchors=desk_anchors(),
        head_hidden=96,
        image_size=image_size,
    )


def narrow_config(image_size: int = 64) -> DetectorConfig:
    return DetectorConfig(
        backbone_widths=(8, 16, 24, 32),
        neck_channels=48,
        anchors=desk_anchors(),
        head_hidden=64,
        image_size=image_size,
    )


PRESETS = {"wide": wide_config, "narrow": narrow_config}


def desk_dataset_spec(num_images: int, seed: int, image_size: int = 64) -> DatasetSpec:
    return DatasetSpec(
        num_images=num_images,
        image_size=image_size,
        min_box_side=10.0,
        max_box_side=28.0,
        seed=seed,
    )
