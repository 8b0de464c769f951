"""Evaluation: mAP, the six-way error taxonomy, per-channel teacher–student
feature distance, and object/background gradient-norm analysis.

All metrics are numpy-side and operate on plain detection/ground-truth
arrays; only the gradient-norm analysis touches torch.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import detector as det
from .boxes import iou_matrix
from .data import supercategory_of
from .errors import DatasetError
from .masks import make_gt_mask

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 1.0, 0.05), 2))
ERROR_CATEGORIES = ("Cor", "Loc", "Sim", "Oth", "BG")


@dataclass
class Detection:
    box: np.ndarray  # (4,)
    class_id: int
    score: float


def detections_from_arrays(boxes, scores, classes) -> list[Detection]:
    return [
        Detection(box=np.asarray(b, dtype=np.float64), class_id=int(c), score=float(s))
        for b, s, c in zip(boxes, scores, classes)
    ]


def predict_dataset(model, samples, batch_size: int = 16, **detect_kw):
    """Run inference over samples; list of score-sorted Detection lists."""
    out = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo : lo + batch_size]
        images = det.images_to_tensor([s.image for s in chunk])
        for boxes, scores, classes in det.detect(model, images, **detect_kw):
            out.append(detections_from_arrays(boxes, scores, classes))
    return out


# ---------------------------------------------------------------------------
# mAP


@dataclass
class MapResult:
    per_class: dict  # (class_id, threshold) -> ap
    classes: tuple
    thresholds: tuple

    @property
    def map50(self) -> float:
        return self.at_threshold(0.5)

    def at_threshold(self, thr: float) -> float:
        vals = [self.per_class[(c, t)] for c, t in self.per_class if t == thr]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def map_all(self) -> float:
        vals = list(self.per_class.values())
        return float(np.mean(vals)) if vals else float("nan")


def _average_precision(scores, matched, n_gt) -> float:
    """All-points interpolated AP from per-detection match flags.

    ``scores``/``matched`` are already in evaluation order (score descending,
    ties broken deterministically upstream).
    """
    if n_gt == 0:
        return float("nan")
    if len(scores) == 0:
        return 0.0
    tp = np.cumsum(matched)
    fp = np.cumsum(~matched)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # precision envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, envelope):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def compute_map(detections_per_image, gts_per_image, iou_thresholds=COCO_THRESHOLDS) -> MapResult:
    """Greedy-matched average precision per class and IoU threshold.

    ``gts_per_image`` is a list of (boxes [G,4], labels [G]) pairs aligned
    with the detections.  Detections are visited highest score first (ties:
    image order, then within-image order); each ground truth is matched at
    most once, to the best-IoU detection candidate.  Classes absent from the
    ground truth are excluded from the mean.
    """
    thresholds = tuple(float(t) for t in iou_thresholds)
    if any(not 0.0 < t < 1.0 for t in thresholds):
        raise ValueError("IoU thresholds must lie in (0, 1)")
    if len(detections_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truths must align over images")

    class_ids = set()
    for boxes, labels in gts_per_image:
        class_ids.update(int(c) for c in np.asarray(labels).reshape(-1))
    classes = tuple(sorted(class_ids))

    per_class = {}
    for c in classes:
        # flatten this class's detections over all images
        rows = []  # (score, image_idx, det_idx, box)
        for img, dets in enumerate(detections_per_image):
            for di, d in enumerate(dets):
                if d.class_id == c:
                    rows.append((d.score, img, di, d.box))
        rows.sort(key=lambda r: (-r[0], r[1], r[2]))
        gt_boxes = [
            np.asarray(boxes, dtype=np.float64).reshape(-1, 4)[
                np.asarray(labels, dtype=np.int64).reshape(-1) == c
            ]
            for boxes, labels in gts_per_image
        ]
        n_gt = sum(len(g) for g in gt_boxes)
        scores = np.array([r[0] for r in rows], dtype=np.float64)
        for thr in thresholds:
            used = [np.zeros(len(g), dtype=bool) for g in gt_boxes]
            matched = np.zeros(len(rows), dtype=bool)
            for i, (_, img, _, box) in enumerate(rows):
                cand = gt_boxes[img]
                if len(cand) == 0:
                    continue
                ious = iou_matrix(box[None, :], cand)[0]
                ious[used[img]] = -1.0
                j = int(ious.argmax())
                if ious[j] >= thr:
                    matched[i] = True
                    used[img][j] = True
            per_class[(c, thr)] = _average_precision(scores, matched, n_gt)
    # classes with no gt never enter per_class, so the means exclude them
    return MapResult(per_class=per_class, classes=classes, thresholds=thresholds)


# ---------------------------------------------------------------------------
# error taxonomy


@dataclass
class ErrorBreakdown:
    """Detection counts per category and class, plus per-class FN."""

    per_class: dict = field(default_factory=dict)  # class_id -> {cat: n}
    fn_per_class: dict = field(default_factory=dict)  # gt class_id -> n

    def _row(self, class_id: int) -> dict:
        return self.per_class.setdefault(
            class_id, {cat: 0 for cat in ERROR_CATEGORIES}
        )

    def total(self, category: str) -> int:
        if category == "FN":
            return sum(self.fn_per_class.values())
        return sum(row[category] for row in self.per_class.values())

    @property
    def num_detections(self) -> int:
        return sum(self.total(cat) for cat in ERROR_CATEGORIES)


def categorize_errors(detections_per_image, gts_per_image, num_classes: int) -> ErrorBreakdown:
    """Assign every detection to exactly one of Cor/Loc/Sim/Oth/BG.

    Each detection is judged against its best-IoU ground truth (any class):
    Cor — correct class, IoU ≥ 0.5; Loc — correct class, 0.1 ≤ IoU < 0.5;
    Sim — wrong class but same supercategory, IoU ≥ 0.1; Oth — wrong class,
    IoU ≥ 0.1; BG — IoU < 0.1.  Boundary values go to the higher category.
    FN counts ground truths never claimed by a Cor detection.
    """
    breakdown = ErrorBreakdown()
    for dets, (gt_boxes, gt_labels) in zip(detections_per_image, gts_per_image):
        gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
        gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
        covered = np.zeros(len(gt_boxes), dtype=bool)
        for d in dets:
            if not 1 <= d.class_id <= num_classes:
                raise DatasetError(f"detection has unknown class_id {d.class_id}")
            row = breakdown._row(d.class_id)
            if len(gt_boxes) == 0:
                row["BG"] += 1
                continue
            ious = iou_matrix(d.box[None, :], gt_boxes)[0]
            j = int(ious.argmax())
            iou = ious[j]
            same_class = d.class_id == int(gt_labels[j])
            same_super = supercategory_of(d.class_id) == supercategory_of(int(gt_labels[j]))
            if iou >= 0.5 and same_class:
                row["Cor"] += 1
                covered[j] = True
            elif iou >= 0.1 and same_class:
                row["Loc"] += 1
            elif iou >= 0.1 and same_super:
                row["Sim"] += 1
            elif iou >= 0.1:
                row["Oth"] += 1
            else:
                row["BG"] += 1
        for j in np.flatnonzero(~covered):
            c = int(gt_labels[j])
            breakdown.fn_per_class[c] = breakdown.fn_per_class.get(c, 0) + 1
    return breakdown


# ---------------------------------------------------------------------------
# per-channel feature distance


def per_channel_distance(teacher_feat, student_feat_adapted, mask):
    """Mean |S − T| per channel over object cells and background cells.

    Features are [C, H, W]; an empty region yields NaN entries (absent), not
    zero.  Returns (d_obj [C], d_bg [C]).
    """
    t = np.asarray(teacher_feat, dtype=np.float64)
    s = np.asarray(student_feat_adapted, dtype=np.float64)
    if t.shape != s.shape:
        raise ValueError(f"shape mismatch {t.shape} vs {s.shape}")
    m = np.asarray(getattr(mask, "values", mask), dtype=np.float64)
    if m.shape != t.shape[1:]:
        raise ValueError(f"mask shape {m.shape} does not match features {t.shape}")
    diff = np.abs(s - t)
    n_obj = m.sum()
    n_bg = m.size - n_obj
    with np.errstate(invalid="ignore"):
        d_obj = (diff * m).sum(axis=(1, 2)) / n_obj if n_obj else np.full(t.shape[0], np.nan)
        d_bg = (diff * (1 - m)).sum(axis=(1, 2)) / n_bg if n_bg else np.full(t.shape[0], np.nan)
    return d_obj, d_bg


def aggregate_channel_distance(triples):
    """Cell-weighted aggregation of per-image distances.

    ``triples`` yields (teacher [C,H,W], student [C,H,W], mask); returns
    (d_obj [C], d_bg [C]) averaged over every object/background cell in the
    whole set, NaN where a region is empty throughout.
    """
    obj_sum = bg_sum = None
    obj_n = bg_n = 0.0
    for t, s, mask in triples:
        t = np.asarray(t, dtype=np.float64)
        s = np.asarray(s, dtype=np.float64)
        m = np.asarray(getattr(mask, "values", mask), dtype=np.float64)
        diff = np.abs(s - t)
        if obj_sum is None:
            obj_sum = np.zeros(t.shape[0])
            bg_sum = np.zeros(t.shape[0])
        obj_sum += (diff * m).sum(axis=(1, 2))
        bg_sum += (diff * (1 - m)).sum(axis=(1, 2))
        obj_n += m.sum()
        bg_n += m.size - m.sum()
    if obj_sum is None:
        raise ValueError("no images supplied")
    with np.errstate(invalid="ignore"):
        d_obj = obj_sum / obj_n if obj_n else np.full_like(obj_sum, np.nan)
        d_bg = bg_sum / bg_n if bg_n else np.full_like(bg_sum, np.nan)
    return d_obj, d_bg


# ---------------------------------------------------------------------------
# gradient-norm analysis


def neck_loss_closure(model, images: torch.Tensor, gt_boxes_list, gt_labels_list,
                      num_proposals: int = 64, iou_pos: float = 0.5):
    """Detection loss as a pure function of the neck feature values.

    Proposals are fixed from an initial no-grad forward, so re-evaluating
    the closure at perturbed neck values probes exactly the quantity whose
    gradient the analysis reports.  Returns (neck_values, closure) where
    ``closure(list of neck tensors) -> scalar loss``.
    """
    cfg = model.config
    with torch.no_grad():
        _, neck0 = model.forward_features(images)
        rpn0 = model.rpn_forward(neck0)
        props = det.rpn_propose(cfg, rpn0, k=num_proposals)
    props = [
        det.label_proposals(p, b, l, iou_pos)
        for p, b, l in zip(props, gt_boxes_list, gt_labels_list)
    ]

    def closure(neck):
        rpn_out = model.rpn_forward(neck)
        pooled = det.pool_proposals(neck, props, cfg)
        logits, deltas = model.head_forward(pooled)
        l_cls, l_reg = det.head_loss(cfg, logits, deltas, props)
        l_rpn = det.rpn_loss(cfg, rpn_out, gt_boxes_list)
        return l_cls + l_reg + l_rpn

    return [n.detach().clone() for n in neck0], closure


def feature_gradient_norms(model, sample, level: int = 0, num_proposals: int = 64):
    """Per-location L2 norm of ∂(detection loss)/∂(neck features).

    Returns (norm_map [H, W], avg_obj, avg_bg) where the averages split the
    map by the ground-truth object mask at this level's stride (all boxes,
    no level assignment — the question is where gradient mass sits
    spatially).  Either average is NaN when its region is empty.
    """
    images = det.images_to_tensor([sample.image])
    neck_values, closure = neck_loss_closure(
        model, images, [sample.boxes()], [sample.labels()], num_proposals
    )
    neck = [n.requires_grad_(True) for n in neck_values]
    loss = closure(neck)
    grads = torch.autograd.grad(loss, neck[level], allow_unused=True)[0]
    if grads is None:
        grads = torch.zeros_like(neck[level])
    norm_map = grads[0].norm(dim=0).detach().cpu().numpy().astype(np.float64)

    H, W = norm_map.shape
    mask = make_gt_mask(sample.boxes(), H, W, model.config.strides[level]).values
    n_obj = mask.sum()
    n_bg = mask.size - n_obj
    avg_obj = float((norm_map * mask).sum() / n_obj) if n_obj else float("nan")
    avg_bg = float((norm_map * (1 - mask)).sum() / n_bg) if n_bg else float("nan")
    return norm_map, avg_obj, avg_bg


# ---------------------------------------------------------------------------
# report emission


def emit_report(out_dir, map_result: MapResult = None, errors: ErrorBreakdown = None,
                channel_distance=None, grad_norms=None, summary: dict = None) -> Path:
    """Write whichever report pieces are supplied; returns the directory.

    File formats: map.csv (class, iou_threshold, ap), errors.csv (class,
    Cor, Loc, Sim, Oth, BG, FN), channel_distance.csv (channel, d_obj,
    d_bg), grad_norms.csv (region, mean_l2), summary.json.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if map_result is not None:
        with open(out_dir / "map.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "iou_threshold", "ap"])
            for (c, thr), ap in sorted(map_result.per_class.items()):
                w.writerow([c, thr, f"{ap:.6f}"])

    if errors is not None:
        with open(out_dir / "errors.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "Cor", "Loc", "Sim", "Oth", "BG", "FN"])
            all_ids = sorted(set(errors.per_class) | set(errors.fn_per_class))
            for c in all_ids:
                row = errors.per_class.get(c, {cat: 0 for cat in ERROR_CATEGORIES})
                w.writerow(
                    [c] + [row[cat] for cat in ERROR_CATEGORIES]
                    + [errors.fn_per_class.get(c, 0)]
                )

    if channel_distance is not None:
        d_obj, d_bg = channel_distance
        with open(out_dir / "channel_distance.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["channel", "d_obj", "d_bg"])
            for c in range(len(d_obj)):
                w.writerow([c, f"{d_obj[c]:.8f}", f"{d_bg[c]:.8f}"])

    if grad_norms is not None:
        avg_obj, avg_bg = grad_norms
        with open(out_dir / "grad_norms.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["region", "mean_l2"])
            w.writerow(["obj", f"{avg_obj:.10f}"])
            w.writerow(["bg", f"{avg_bg:.10f}"])

    if summary is not None:
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return out_dir
