"""Miniature two-stage anchor-based detector.

Backbone (strided 3×3 conv stages) → two-level feature pyramid → shared RPN
head → single-sample-point RoI align → MLP classification/regression head.
Sized so a full training run takes minutes on one CPU core, while keeping the
structure of the full-scale pipeline: anchors, proposal NMS, per-class box
deltas, balanced RPN sampling.

GroupNorm and SiLU are used throughout: GroupNorm keeps behaviour independent
of batch composition, and every nonlinearity being smooth lets analytic
gradients be verified against central finite differences.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import boxes as boxlib
from .errors import ConfigurationError, DegenerateBoxError, TeacherStudentMismatchError
from .masks import level_thresholds

MIN_BOX_SIDE = 1.0  # proposals thinner than this after clipping are unusable


def _anchor_pairs(scales, aspects=(0.5, 1.0, 2.0)):
    return tuple((float(s), float(a)) for s in scales for a in aspects)


def default_anchors(image_size: int = 128):
    """Per-level (scale, aspect) pairs roughly covering the box-size range."""
    unit = image_size / 128.0
    return (
        _anchor_pairs((14 * unit, 20 * unit)),
        _anchor_pairs((28 * unit, 40 * unit)),
    )


@dataclass(frozen=True)
class DetectorConfig:
    backbone_widths: tuple = (16, 32, 48, 64)
    neck_channels: int = 48
    num_levels: int = 2
    strides: tuple = (8, 16)
    anchors: tuple = field(default_factory=default_anchors)
    num_classes: int = 8
    roi_output: int = 5
    head_hidden: int = 64
    image_size: int = 128

    def validate(self):
        if list(self.strides) != sorted(set(self.strides)):
            raise ConfigurationError("strides must be strictly ascending")
        if self.num_levels != len(self.strides):
            raise ConfigurationError("num_levels must equal len(strides)")
        for s in self.strides:
            if s < 1 or (s & (s - 1)) != 0:
                raise ConfigurationError(f"stride {s} is not a power of two")
            if self.image_size % s != 0:
                raise ConfigurationError(
                    f"stride {s} does not divide image_size {self.image_size}"
                )
        n_stages = int(self.strides[-1]).bit_length() - 1
        if len(self.backbone_widths) != n_stages:
            raise ConfigurationError(
                f"need {n_stages} backbone stages for max stride "
                f"{self.strides[-1]}, got {len(self.backbone_widths)}"
            )
        if len(self.anchors) != self.num_levels:
            raise ConfigurationError("need one anchor list per level")
        counts = {len(a) for a in self.anchors}
        if len(counts) != 1 or 0 in counts:
            raise ConfigurationError("every level needs the same non-zero anchor count")
        if any(w < 1 for w in self.backbone_widths) or self.neck_channels < 1:
            raise ConfigurationError("channel counts must be positive")
        if self.num_classes < 2:
            raise ConfigurationError("need at least 2 classes")
        if self.roi_output < 1 or self.head_hidden < 1:
            raise ConfigurationError("roi_output and head_hidden must be positive")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchors[0])

    def feature_shape(self, level: int):
        side = self.image_size // self.strides[level]
        return side, side

    def dominates(self, student: "DetectorConfig") -> bool:
        """Whether this config can teach ``student``: same geometry and task,
        at least as wide everywhere."""
        same = (
            self.strides == student.strides
            and self.anchors == student.anchors
            and self.num_classes == student.num_classes
            and self.roi_output == student.roi_output
            and self.image_size == student.image_size
        )
        wider = (
            len(self.backbone_widths) == len(student.backbone_widths)
            and all(
                a >= b
                for a, b in zip(self.backbone_widths, student.backbone_widths)
            )
            and self.neck_channels >= student.neck_channels
            and self.head_hidden >= student.head_hidden
        )
        return same and wider

    def require_teacher_of(self, student: "DetectorConfig"):
        if not self.dominates(student):
            raise TeacherStudentMismatchError(
                "teacher config must share the student's geometry/classes and "
                "be at least as wide in every stage"
            )


@dataclass
class FeatureMap:
    """One pyramid level's activations in H×W×Ch layout with its stride."""

    values: np.ndarray
    level: int
    stride: int


def to_feature_map(tensor: torch.Tensor, level: int, stride: int) -> FeatureMap:
    """Convert a [C, H, W] tensor to the H×W×C analysis layout."""
    arr = tensor.detach().cpu().numpy().transpose(1, 2, 0)
    return FeatureMap(values=arr, level=level, stride=stride)


def _num_groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


def _conv_gn_silu(c_in, c_out, stride):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1),
        nn.GroupNorm(_num_groups(c_out), c_out),
        nn.SiLU(),
    )


class MiniDetector(nn.Module):
    def __init__(self, config: DetectorConfig):
        super().__init__()
        config.validate()
        self.config = config

        stages = []
        c_in = 3
        for width in config.backbone_widths:
            stages.append(
                nn.Sequential(
                    _conv_gn_silu(c_in, width, stride=2),
                    _conv_gn_silu(width, width, stride=1),
                )
            )
            c_in = width
        self.backbone = nn.ModuleList(stages)
        # stage k (0-based) has stride 2**(k+1); the neck taps these:
        self._tap_stages = [int(s).bit_length() - 2 for s in config.strides]

        nc = config.neck_channels
        self.lateral = nn.ModuleList(
            nn.Conv2d(config.backbone_widths[k], nc, 1) for k in self._tap_stages
        )
        self.smooth = nn.ModuleList(
            nn.Sequential(nn.Conv2d(nc, nc, 3, padding=1), nn.GroupNorm(_num_groups(nc), nc))
            for _ in self._tap_stages
        )

        A = config.anchors_per_cell
        self.rpn_shared = _conv_gn_silu(nc, nc, stride=1)
        self.rpn_score = nn.Conv2d(nc, A, 1)
        self.rpn_delta = nn.Conv2d(nc, 4 * A, 1)

        C = config.num_classes
        roi_dim = nc * config.roi_output**2
        self.head_mlp = nn.Sequential(
            nn.Linear(roi_dim, config.head_hidden),
            nn.SiLU(),
            nn.Linear(config.head_hidden, config.head_hidden),
            nn.SiLU(),
        )
        self.head_cls = nn.Linear(config.head_hidden, C + 1)
        self.head_reg = nn.Linear(config.head_hidden, 4 * C)

        with torch.no_grad():
            for m in (self.rpn_score, self.rpn_delta):
                m.weight.normal_(0.0, 0.01)
                m.bias.zero_()
            # start proposals at low objectness so early NMS is not noise-driven
            self.rpn_score.bias.fill_(-2.0)
            self.head_cls.weight.normal_(0.0, 0.01)
            self.head_cls.bias.zero_()
            self.head_reg.weight.normal_(0.0, 0.001)
            self.head_reg.bias.zero_()

    def forward_features(self, images: torch.Tensor):
        """images [B, 3, H, W] → (backbone_final, neck levels fine→coarse)."""
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected [B, 3, H, W] images, got {tuple(images.shape)}")
        if images.shape[2] != self.config.image_size or images.shape[3] != self.config.image_size:
            raise ValueError(
                f"image size {tuple(images.shape[2:])} does not match configured "
                f"{self.config.image_size}"
            )
        x = images
        taps = {}
        for k, stage in enumerate(self.backbone):
            x = stage(x)
            if k in self._tap_stages:
                taps[k] = x
        backbone_final = x

        laterals = [conv(taps[k]) for conv, k in zip(self.lateral, self._tap_stages)]
        merged = [None] * len(laterals)
        merged[-1] = laterals[-1]
        for i in range(len(laterals) - 2, -1, -1):
            up = F.interpolate(merged[i + 1], scale_factor=2.0, mode="nearest")
            merged[i] = laterals[i] + up
        neck = [smooth(m) for smooth, m in zip(self.smooth, merged)]
        return backbone_final, neck

    def rpn_forward(self, neck):
        """Per level: (scores [B, A, H, W], deltas [B, 4A, H, W])."""
        out = []
        for level_map in neck:
            shared = self.rpn_shared(level_map)
            out.append((self.rpn_score(shared), self.rpn_delta(shared)))
        return out

    def head_forward(self, pooled: torch.Tensor):
        """pooled [R, C, S, S] → (logits [R, C+1], deltas [R, 4·C])."""
        z = self.head_mlp(pooled.flatten(1))
        return self.head_cls(z), self.head_reg(z)


# ---------------------------------------------------------------------------
# anchors and proposals


@functools.lru_cache(maxsize=32)
def anchor_boxes(config: DetectorConfig) -> np.ndarray:
    """All anchors in image coordinates, level-major then row-major then
    per-cell anchor order; shape [N, 4]."""
    out = []
    for level, stride in enumerate(config.strides):
        H, W = config.feature_shape(level)
        cy, cx = np.meshgrid(
            (np.arange(H) + 0.5) * stride, (np.arange(W) + 0.5) * stride, indexing="ij"
        )
        centers = np.stack([cx.ravel(), cy.ravel()], axis=1)  # [H·W, 2]
        sides = []
        for scale, aspect in config.anchors[level]:
            w = scale / np.sqrt(aspect)
            h = scale * np.sqrt(aspect)
            sides.append((w, h))
        sides = np.asarray(sides)  # [A, 2]
        wh = np.broadcast_to(sides[None, :, :], (H * W, len(sides), 2))
        ctr = np.broadcast_to(centers[:, None, :], wh.shape)
        level_boxes = np.concatenate([ctr - wh / 2.0, ctr + wh / 2.0], axis=2)
        out.append(level_boxes.reshape(-1, 4))
    return np.concatenate(out, axis=0)


@dataclass
class Proposals:
    """A per-image proposal set in array form.

    ``labels`` is the binary positive/negative assignment b_i (−1 before
    labelling); ``gt_class`` is 0 (background) for negatives, the matched
    class for positives; ``gt_box`` is the matched box (zeros for negatives).
    """

    boxes: np.ndarray  # [K, 4]
    objectness: np.ndarray  # [K]
    anchor_index: np.ndarray  # [K]
    source: str = "student"
    labels: np.ndarray = None  # [K] in {0, 1}
    gt_class: np.ndarray = None  # [K] in [0..C]
    gt_box: np.ndarray = None  # [K, 4]

    def __post_init__(self):
        k = len(self.boxes)
        if self.labels is None:
            self.labels = np.full(k, -1, dtype=np.int64)
        if self.gt_class is None:
            self.gt_class = np.zeros(k, dtype=np.int64)
        if self.gt_box is None:
            self.gt_box = np.zeros((k, 4), dtype=np.float64)

    def __len__(self):
        return len(self.boxes)

    @property
    def k_obj(self) -> int:
        return int((self.labels == 1).sum())

    @property
    def k_bg(self) -> int:
        return int((self.labels == 0).sum())


def _flatten_rpn_out(rpn_out):
    """Flatten per-level RPN maps to anchor-index order.

    Returns (scores [B, N], deltas [B, N, 4]) with N = Σ_level H·W·A,
    matching :func:`anchor_boxes` ordering.
    """
    scores, deltas = [], []
    for s, d in rpn_out:
        B, A, H, W = s.shape
        scores.append(s.permute(0, 2, 3, 1).reshape(B, -1))
        deltas.append(d.view(B, A, 4, H, W).permute(0, 3, 4, 1, 2).reshape(B, -1, 4))
    return torch.cat(scores, dim=1), torch.cat(deltas, dim=1)


def rpn_propose(
    config: DetectorConfig,
    rpn_out,
    k: int,
    nms_iou: float = 0.7,
    pre_nms_top_n: int = 256,
    source: str = "student",
) -> list[Proposals]:
    """Decode and NMS-filter RPN output into ≤ k proposals per image.

    Ties are broken by anchor index, so the output is deterministic.
    Boxes are clipped to the image; boxes thinner than MIN_BOX_SIDE after
    clipping are dropped.
    """
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    if not 0.0 < nms_iou < 1.0:
        raise ConfigurationError("nms_iou must be in (0, 1)")
    anchors = anchor_boxes(config)
    scores_t, deltas_t = _flatten_rpn_out(rpn_out)
    scores_all = torch.sigmoid(scores_t).detach().cpu().numpy().astype(np.float64)
    deltas_all = deltas_t.detach().cpu().numpy().astype(np.float64)

    out = []
    for b in range(scores_all.shape[0]):
        scores = scores_all[b]
        order = np.lexsort((np.arange(len(scores)), -scores))[:pre_nms_top_n]
        decoded = boxlib.decode_deltas(anchors[order], deltas_all[b][order])
        decoded = boxlib.clip_boxes(decoded, config.image_size)
        w = decoded[:, 2] - decoded[:, 0]
        h = decoded[:, 3] - decoded[:, 1]
        ok = (w >= MIN_BOX_SIDE) & (h >= MIN_BOX_SIDE)
        decoded, kept_scores, kept_idx = decoded[ok], scores[order][ok], order[ok]
        keep = boxlib.nms(decoded, kept_scores, nms_iou)[:k]
        out.append(
            Proposals(
                boxes=decoded[keep],
                objectness=kept_scores[keep],
                anchor_index=kept_idx[keep],
                source=source,
            )
        )
    return out


def label_proposals(props: Proposals, gt_boxes, gt_labels, iou_pos: float = 0.5) -> Proposals:
    """Assign binary labels: positive iff max IoU with any gt ≥ ``iou_pos``."""
    if not 0.0 < iou_pos < 1.0:
        raise ConfigurationError("iou_pos must be in (0, 1)")
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    k = len(props)
    labels = np.zeros(k, dtype=np.int64)
    gt_class = np.zeros(k, dtype=np.int64)
    gt_box = np.zeros((k, 4), dtype=np.float64)
    if k and len(gt_boxes):
        ious = boxlib.iou_matrix(props.boxes, gt_boxes)
        best = ious.argmax(axis=1)
        best_iou = ious[np.arange(k), best]
        pos = best_iou >= iou_pos
        labels[pos] = 1
        gt_class[pos] = gt_labels[best[pos]]
        gt_box[pos] = gt_boxes[best[pos]]
    return replace(
        props, labels=labels, gt_class=gt_class, gt_box=gt_box
    )


# ---------------------------------------------------------------------------
# RoI align


def _bilinear_pool(feature: torch.Tensor, u: torch.Tensor, v: torch.Tensor):
    """Sample [C, H, W] ``feature`` at fractional coords (u, v) with border
    clamp; u/v may have any shape, output is [C, *u.shape]."""
    H, W = feature.shape[-2:]
    u = u.clamp(0.0, W - 1.0)
    v = v.clamp(0.0, H - 1.0)
    u0 = u.floor().long().clamp(0, W - 1)
    v0 = v.floor().long().clamp(0, H - 1)
    u1 = (u0 + 1).clamp(0, W - 1)
    v1 = (v0 + 1).clamp(0, H - 1)
    fu = (u - u0).to(feature.dtype)
    fv = (v - v0).to(feature.dtype)
    f00 = feature[..., v0, u0]
    f01 = feature[..., v0, u1]
    f10 = feature[..., v1, u0]
    f11 = feature[..., v1, u1]
    top = f00 * (1 - fu) + f01 * fu
    bot = f10 * (1 - fu) + f11 * fu
    return top * (1 - fv) + bot * fv


def roi_align(feature: torch.Tensor, box, out_size: int, stride: int) -> torch.Tensor:
    """Pool one box from a [C, H, W] feature map to [C, out, out].

    One bilinear sample per output cell, at the cell center mapped into
    feature coordinates (x / stride − 0.5).
    """
    if out_size < 1:
        raise ConfigurationError("out_size must be >= 1")
    box = np.asarray(box, dtype=np.float64).reshape(4)
    H, W = feature.shape[-2:]
    clipped = boxlib.clip_boxes(box, int(W * stride))[0]
    if (clipped[2] - clipped[0]) * (clipped[3] - clipped[1]) < 1.0:
        raise DegenerateBoxError(f"box {box.tolist()} has area < 1 px after clipping")
    x0, y0, x1, y1 = clipped
    cell_w = (x1 - x0) / out_size
    cell_h = (y1 - y0) / out_size
    qs = torch.arange(out_size, dtype=feature.dtype, device=feature.device)
    xs = x0 + (qs + 0.5) * cell_w
    ys = y0 + (qs + 0.5) * cell_h
    u = xs / stride - 0.5
    v = ys / stride - 0.5
    return _bilinear_pool(feature, u[None, :].expand(out_size, -1), v[:, None].expand(-1, out_size))


def roi_align_batch(
    features: torch.Tensor, rois: np.ndarray, batch_idx: np.ndarray, out_size: int, stride: int
) -> torch.Tensor:
    """Pool many boxes from batched [B, C, H, W] features → [R, C, out, out]."""
    R = len(rois)
    C = features.shape[1]
    if R == 0:
        return features.new_zeros((0, C, out_size, out_size))
    rois = np.asarray(rois, dtype=np.float64).reshape(R, 4)
    dev, dt = features.device, features.dtype
    box_t = torch.as_tensor(rois, dtype=dt, device=dev)
    bi = torch.as_tensor(np.asarray(batch_idx), dtype=torch.long, device=dev)
    qs = torch.arange(out_size, dtype=dt, device=dev) + 0.5
    cell_w = (box_t[:, 2] - box_t[:, 0]) / out_size
    cell_h = (box_t[:, 3] - box_t[:, 1]) / out_size
    xs = box_t[:, 0:1] + qs[None, :] * cell_w[:, None]  # [R, S]
    ys = box_t[:, 1:2] + qs[None, :] * cell_h[:, None]
    u = (xs / stride - 0.5).clamp(0.0, features.shape[3] - 1.0)
    v = (ys / stride - 0.5).clamp(0.0, features.shape[2] - 1.0)
    u = u[:, None, :].expand(R, out_size, out_size)  # columns vary along q
    v = v[:, :, None].expand(R, out_size, out_size)  # rows vary along p
    u0 = u.floor().long().clamp(0, features.shape[3] - 1)
    v0 = v.floor().long().clamp(0, features.shape[2] - 1)
    u1 = (u0 + 1).clamp(0, features.shape[3] - 1)
    v1 = (v0 + 1).clamp(0, features.shape[2] - 1)
    fu = (u - u0).to(dt)[:, None]  # [R, 1, S, S]
    fv = (v - v0).to(dt)[:, None]
    b = bi[:, None, None].expand(R, out_size, out_size)

    def corner(vv, uu):
        # features[b, :, vv, uu] → [R, S, S, C] → [R, C, S, S]
        return features[b, :, vv, uu].permute(0, 3, 1, 2)

    top = corner(v0, u0) * (1 - fu) + corner(v0, u1) * fu
    bot = corner(v1, u0) * (1 - fu) + corner(v1, u1) * fu
    return top * (1 - fv) + bot * fv


def assign_proposal_levels(boxes: np.ndarray, config: DetectorConfig) -> np.ndarray:
    """Pyramid level for pooling each box, by the shared box-scale rule."""
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    thresholds = np.asarray(level_thresholds(config.strides))
    sides = np.sqrt(boxlib.box_area(boxes))
    return np.searchsorted(thresholds, sides, side="right")


def pool_proposals(neck, props_list, config: DetectorConfig) -> torch.Tensor:
    """RoI-align every proposal of a batch from its assigned neck level.

    ``props_list`` has one Proposals per image, aligned with the batch axis
    of ``neck``.  Output rows are ordered image-major, proposal order
    preserved within each image.
    """
    all_boxes = np.concatenate([p.boxes for p in props_list], axis=0) if props_list else np.zeros((0, 4))
    batch_idx = np.concatenate(
        [np.full(len(p), i, dtype=np.int64) for i, p in enumerate(props_list)]
    ) if props_list else np.zeros(0, dtype=np.int64)
    R = len(all_boxes)
    S = config.roi_output
    if R == 0:
        return neck[0].new_zeros((0, config.neck_channels, S, S))
    levels = assign_proposal_levels(all_boxes, config)
    pooled_parts, index_parts = [], []
    for lv, stride in enumerate(config.strides):
        rows = np.flatnonzero(levels == lv)
        if len(rows) == 0:
            continue
        pooled_parts.append(
            roi_align_batch(neck[lv], all_boxes[rows], batch_idx[rows], S, stride)
        )
        index_parts.append(rows)
    perm = np.concatenate(index_parts)
    inv = np.empty(R, dtype=np.int64)
    inv[perm] = np.arange(R)
    return torch.cat(pooled_parts, dim=0)[torch.as_tensor(inv, device=neck[0].device)]


# ---------------------------------------------------------------------------
# training targets and losses


def compute_rpn_targets(anchors: np.ndarray, gt_boxes, pos_iou: float = 0.5, neg_iou: float = 0.3):
    """Per-anchor labels in {1 pos, 0 neg, −1 ignore} and encoded deltas.

    Positive: IoU ≥ pos_iou with some gt, or the anchor is (one of) the
    best-IoU anchors for a gt box.  Negative: best IoU < neg_iou.  The band
    in between is ignored.  Delta targets are zeros for non-positives.
    """
    n = len(anchors)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    labels = np.zeros(n, dtype=np.int64)
    targets = np.zeros((n, 4), dtype=np.float64)
    if len(gt_boxes) == 0:
        return labels, targets
    ious = boxlib.iou_matrix(anchors, gt_boxes)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels[best_iou >= neg_iou] = -1
    labels[best_iou >= pos_iou] = 1
    # every gt gets its best anchor(s) even below the threshold
    per_gt_max = ious.max(axis=0)
    anchor_is_best = (ious == per_gt_max[None, :]) & (per_gt_max[None, :] > 0)
    forced = anchor_is_best.any(axis=1)
    labels[forced] = 1
    # forced anchors regress to the gt they are best for (not their argmax)
    forced_gt = np.where(forced, anchor_is_best.argmax(axis=1), best_gt)
    pos = labels == 1
    targets[pos] = boxlib.encode_deltas(anchors[pos], gt_boxes[forced_gt[pos]])
    return labels, targets


def _smooth_l1(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-box smooth-L1 (β = 1), summed over the 4 coordinates."""
    return F.smooth_l1_loss(pred, target, beta=1.0, reduction="none").sum(dim=-1)


def rpn_loss(config: DetectorConfig, rpn_out, gt_boxes_list):
    """Balanced objectness BCE plus smooth-L1 on positive anchors.

    The BCE averages positive and negative anchors separately and weights
    the two means equally, so the huge negative pool does not drown the
    positives.
    """
    anchors = anchor_boxes(config)
    scores, deltas = _flatten_rpn_out(rpn_out)
    total = scores.new_zeros(())
    B = scores.shape[0]
    for b in range(B):
        labels_np, targets_np = compute_rpn_targets(anchors, gt_boxes_list[b])
        labels = torch.as_tensor(labels_np, device=scores.device)
        pos = labels == 1
        neg = labels == 0
        bce = F.binary_cross_entropy_with_logits(
            scores[b], (labels == 1).to(scores.dtype), reduction="none"
        )
        parts = []
        if pos.any():
            parts.append(bce[pos].mean())
        if neg.any():
            parts.append(bce[neg].mean())
        cls_term = sum(parts) / len(parts) if parts else scores.new_zeros(())
        if pos.any():
            t = torch.as_tensor(targets_np[labels_np == 1], dtype=deltas.dtype, device=deltas.device)
            reg_term = _smooth_l1(deltas[b][pos], t).mean()
        else:
            reg_term = scores.new_zeros(())
        total = total + cls_term + reg_term
    return total / max(B, 1)


def head_loss(config: DetectorConfig, logits: torch.Tensor, deltas: torch.Tensor, props_list):
    """(L_cls_gt, L_reg) over a batch's concatenated proposals.

    Classification is cross-entropy over C+1 classes against the assigned
    class (0 = background for negatives); regression is smooth-L1 on the
    matched class's delta columns, positives only, 0 when there are none.
    """
    gt_class = np.concatenate([p.gt_class for p in props_list]) if props_list else np.zeros(0, dtype=np.int64)
    if len(gt_class) != logits.shape[0]:
        raise ValueError("head outputs do not align with proposals")
    if logits.shape[0] == 0:
        return logits.new_zeros(()), logits.new_zeros(())
    labels_t = torch.as_tensor(gt_class, dtype=torch.long, device=logits.device)
    l_cls = F.cross_entropy(logits, labels_t, reduction="mean")

    prop_boxes = np.concatenate([p.boxes for p in props_list])
    binary = np.concatenate([p.labels for p in props_list])
    gt_box = np.concatenate([p.gt_box for p in props_list])
    pos = np.flatnonzero(binary == 1)
    if len(pos) == 0:
        return l_cls, logits.new_zeros(())
    enc = boxlib.encode_deltas(prop_boxes[pos], gt_box[pos])
    cols = 4 * (gt_class[pos] - 1)
    col_idx = cols[:, None] + np.arange(4)[None, :]
    pred = deltas[torch.as_tensor(pos, device=deltas.device)[:, None],
                  torch.as_tensor(col_idx, device=deltas.device)]
    target = torch.as_tensor(enc, dtype=deltas.dtype, device=deltas.device)
    l_reg = _smooth_l1(pred, target).mean()
    return l_cls, l_reg


def detection_losses(config, logits, deltas, props_list, rpn_out, gt_boxes_list):
    """All standard supervised losses: (L_cls_gt, L_reg, L_rpn)."""
    l_cls, l_reg = head_loss(config, logits, deltas, props_list)
    l_rpn = rpn_loss(config, rpn_out, gt_boxes_list)
    return l_cls, l_reg, l_rpn


# ---------------------------------------------------------------------------
# inference


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """Stack H×W×3 float arrays into a centred [B, 3, H, W] tensor."""
    arr = np.stack([np.asarray(im) for im in images], axis=0)
    arr = arr.transpose(0, 3, 1, 2) - 0.5
    return torch.as_tensor(arr).to(dtype)


def detect(
    model: MiniDetector,
    images: torch.Tensor,
    score_thresh: float = 0.05,
    nms_iou: float = 0.5,
    max_det: int = 100,
    proposal_k: int = 128,
    proposal_nms: float = 0.7,
):
    """Full inference; per image returns (boxes [D,4], scores [D], classes [D])."""
    config = model.config
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            _, neck = model.forward_features(images)
            rpn_out = model.rpn_forward(neck)
            props_list = rpn_propose(config, rpn_out, k=proposal_k, nms_iou=proposal_nms)
            pooled = pool_proposals(neck, props_list, config)
            logits, deltas = model.head_forward(pooled)
            probs = torch.softmax(logits, dim=1).cpu().numpy().astype(np.float64)
            deltas = deltas.cpu().numpy().astype(np.float64)
    finally:
        model.train(was_training)

    results = []
    offset = 0
    C = config.num_classes
    for props in props_list:
        k = len(props)
        p = probs[offset : offset + k]
        d = deltas[offset : offset + k]
        offset += k
        img_boxes, img_scores, img_classes = [], [], []
        for c in range(1, C + 1):
            sc = p[:, c]
            sel = np.flatnonzero(sc >= score_thresh)
            if len(sel) == 0:
                continue
            dec = boxlib.decode_deltas(props.boxes[sel], d[sel, 4 * (c - 1) : 4 * c])
            dec = boxlib.clip_boxes(dec, config.image_size)
            w = dec[:, 2] - dec[:, 0]
            h = dec[:, 3] - dec[:, 1]
            ok = (w >= MIN_BOX_SIDE) & (h >= MIN_BOX_SIDE)
            dec, sc_ok = dec[ok], sc[sel][ok]
            keep = boxlib.nms(dec, sc_ok, nms_iou)
            img_boxes.append(dec[keep])
            img_scores.append(sc_ok[keep])
            img_classes.append(np.full(len(keep), c, dtype=np.int64))
        if img_boxes:
            bx = np.concatenate(img_boxes)
            scs = np.concatenate(img_scores)
            cls = np.concatenate(img_classes)
            order = np.lexsort((np.arange(len(scs)), -scs))[:max_det]
            results.append((bx[order], scs[order], cls[order]))
        else:
            results.append(
                (np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64))
            )
    return results


# ---------------------------------------------------------------------------
# parameter store


def param_store(model: nn.Module) -> dict[str, np.ndarray]:
    """Named parameter/buffer arrays, in state-dict order, as float32."""
    return {
        name: tensor.detach().cpu().numpy().astype(np.float32)
        for name, tensor in model.state_dict().items()
    }


def load_param_store(model: nn.Module, store: dict):
    sd = model.state_dict()
    if set(sd) != set(store):
        missing = sorted(set(sd) - set(store))
        extra = sorted(set(store) - set(sd))
        raise ConfigurationError(
            f"parameter names do not match (missing {missing[:3]}, extra {extra[:3]})"
        )
    new_sd = {}
    for name, tensor in sd.items():
        arr = np.asarray(store[name])
        if tuple(arr.shape) != tuple(tensor.shape):
            raise ConfigurationError(
                f"shape mismatch for {name}: {arr.shape} vs {tuple(tensor.shape)}"
            )
        new_sd[name] = torch.as_tensor(arr.copy(), dtype=tensor.dtype)
    model.load_state_dict(new_sd)
