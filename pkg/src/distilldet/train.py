"""Training orchestration: teacher pre-training, student baselines, and
distillation runs combining the standard detection losses with the configured
feature/classification transfer terms.

Distillation keeps the full supervised objective (ground-truth cross-entropy,
box regression, RPN losses) and adds the imitation terms on top.  The frozen
teacher's neck features, backbone-final features, proposals, and head logits
depend only on the images, so they are computed once up front; the per-step
cost is then the student's forward/backward alone.

Everything is deterministic per (seed, config, dataset): sample shuffling
uses a dedicated numpy generator, model initialisation is fixed by
``torch.manual_seed``, and no distillation-off code path consumes any RNG
that the baseline path would not.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import detector as det
from .distill import (
    AdaptLayer,
    DistillConfig,
    adapt,
    decoupled_cls_terms,
    decoupled_feature_terms,
    uniform_cls_kl,
    uniform_feature_loss,
)
from .errors import ConfigurationError, DivergenceError
from .masks import make_gt_mask, make_random_mask, masks_for_image

LOG_COLUMNS = (
    "iter",
    "L_cls_gt",
    "L_reg",
    "L_rpn",
    "L_fea_obj",
    "L_fea_bg",
    "L_cls_pos",
    "L_cls_neg",
    "lr",
)


@dataclass
class TrainLog:
    """Per-iteration loss records with a fixed column set."""

    records: list = field(default_factory=list)

    def append(self, **kw):
        if set(kw) != set(LOG_COLUMNS):
            raise ValueError(f"log record must have exactly columns {LOG_COLUMNS}")
        for key, value in kw.items():
            if not math.isfinite(float(value)):
                raise DivergenceError(
                    f"non-finite {key} at iteration {kw['iter']}", record=dict(kw)
                )
        self.records.append({k: kw[k] for k in LOG_COLUMNS})

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            writer.writeheader()
            writer.writerows(self.records)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=np.float64)


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 16
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_epochs: tuple = (8, 11)
    lr_decay_factor: float = 0.1
    seed: int = 0
    iou_pos: float = 0.5
    distill: DistillConfig = field(default_factory=lambda: DistillConfig(neck_mode="none", cls_mode="none"))

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        decays = list(self.lr_decay_epochs)
        if decays != sorted(set(decays)) or any(e < 0 or e >= self.epochs for e in decays):
            raise ConfigurationError(
                "lr_decay_epochs must be strictly ascending and < epochs"
            )
        if not 0.0 < self.iou_pos < 1.0:
            raise ConfigurationError("iou_pos must be in (0, 1)")
        self.distill.validate()


def _lr_for_epoch(cfg: TrainConfig, epoch: int) -> float:
    drops = sum(1 for e in cfg.lr_decay_epochs if epoch >= e)
    return cfg.lr * cfg.lr_decay_factor**drops


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 1 + epoch)))
    return rng.permutation(n)


def _level_masks(samples, config: det.DetectorConfig, distill_cfg: DistillConfig, seed: int):
    """Per-level [N, H, W] float32 mask stacks for the whole dataset."""
    shapes = [config.feature_shape(lv) for lv in range(config.num_levels)]
    stacks = [np.zeros((len(samples), H, W), dtype=np.float32) for H, W in shapes]
    for i, s in enumerate(samples):
        gt_masks = masks_for_image(s.boxes(), shapes, config.strides)
        for lv, m in enumerate(gt_masks):
            if distill_cfg.mask_kind == "gt":
                stacks[lv][i] = m.values
            elif distill_cfg.mask_kind == "all_one":
                stacks[lv][i] = 1.0
            else:  # random control: same foreground budget, random placement
                H, W = shapes[lv]
                frac = m.values.mean()
                rand = make_random_mask(
                    H, W, frac, seed=(seed, 7001, s.sample_id, lv),
                    stride=config.strides[lv], level=lv,
                )
                stacks[lv][i] = rand.values
    return stacks


def _backbone_masks(samples, config: det.DetectorConfig) -> np.ndarray:
    """GT masks at the backbone-final stride, all boxes, no level split."""
    stride = config.strides[-1]
    H, W = config.feature_shape(config.num_levels - 1)
    stack = np.zeros((len(samples), H, W), dtype=np.float32)
    for i, s in enumerate(samples):
        stack[i] = make_gt_mask(s.boxes(), H, W, stride).values
    return stack


@dataclass
class _TeacherCache:
    neck: list  # per level [N, C, H, W] tensors
    backbone: torch.Tensor = None  # [N, Cb, H, W]
    proposals: list = None  # per image labeled Proposals (teacher source)
    head_logits: list = None  # per image [K, C+1] tensors


def _precompute_teacher(teacher, images_t, samples, cfg: TrainConfig, batch: int = 32):
    dcfg = cfg.distill
    n = images_t.shape[0]
    neck_parts, bb_parts, props_all, logits_all = [], [], [], []
    teacher.eval()
    with torch.no_grad():
        for lo in range(0, n, batch):
            chunk = images_t[lo : lo + batch]
            bb, neck = teacher.forward_features(chunk)
            neck_parts.append([lv.clone() for lv in neck])
            if dcfg.distill_backbone:
                bb_parts.append(bb.clone())
            if dcfg.cls_mode != "none" and dcfg.proposal_source == "teacher":
                rpn_out = teacher.rpn_forward(neck)
                props = det.rpn_propose(
                    teacher.config, rpn_out, k=dcfg.num_proposals, source="teacher"
                )
                for j, p in enumerate(props):
                    s = samples[lo + j]
                    labeled = det.label_proposals(p, s.boxes(), s.labels(), cfg.iou_pos)
                    props_all.append(labeled)
                pooled = det.pool_proposals(neck, props, teacher.config)
                logits, _ = teacher.head_forward(pooled)
                offset = 0
                for p in props:
                    logits_all.append(logits[offset : offset + len(p)].clone())
                    offset += len(p)
    neck = [torch.cat([part[lv] for part in neck_parts]) for lv in range(len(neck_parts[0]))]
    return _TeacherCache(
        neck=neck,
        backbone=torch.cat(bb_parts) if bb_parts else None,
        proposals=props_all or None,
        head_logits=logits_all or None,
    )


def run_training(samples, det_cfg: det.DetectorConfig, cfg: TrainConfig, teacher=None,
                 log_every: int = 1):
    """Train a detector on ``samples``; distill from ``teacher`` if configured.

    Returns (model, adapt_layer_or_None, TrainLog, metadata).  The adapt
    layer exists only when feature distillation is active; when no
    distillation mode is on, the training trace is identical to a plain
    baseline run regardless of whether a teacher was supplied.
    """
    cfg.validate()
    det_cfg.validate()
    dcfg = cfg.distill
    distilling = teacher is not None and dcfg.active
    if dcfg.active and teacher is None:
        raise ConfigurationError("distillation configured but no teacher given")
    if distilling:
        teacher.config.require_teacher_of(det_cfg)
        for p in teacher.parameters():
            p.requires_grad_(False)

    if not samples:
        raise ConfigurationError("need at least one training sample")

    torch.use_deterministic_algorithms(True)
    torch.manual_seed(cfg.seed)
    model = det.MiniDetector(det_cfg)
    model.train()

    needs_adapt = distilling and (dcfg.neck_mode != "none" or dcfg.distill_backbone)
    adapt_layer = None
    if needs_adapt:
        ins = [det_cfg.neck_channels] * det_cfg.num_levels
        outs = [teacher.config.neck_channels] * det_cfg.num_levels
        if dcfg.distill_backbone:
            ins.append(det_cfg.backbone_widths[-1])
            outs.append(teacher.config.backbone_widths[-1])
        adapt_layer = AdaptLayer(ins, outs)
        adapt_layer.train()

    params = list(model.parameters())
    if adapt_layer is not None:
        params += list(adapt_layer.parameters())
    opt = torch.optim.SGD(
        params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )

    images_t = det.images_to_tensor([s.image for s in samples])
    gt_boxes = [s.boxes() for s in samples]
    gt_labels = [s.labels() for s in samples]

    cache = None
    fea_masks = None
    bb_masks = None
    if distilling:
        cache = _precompute_teacher(teacher, images_t, samples, cfg)
        if dcfg.neck_mode == "decoupled":
            fea_masks = _level_masks(samples, det_cfg, dcfg, cfg.seed)
        if dcfg.distill_backbone:
            bb_masks = _backbone_masks(samples, det_cfg)

    log = TrainLog()
    step = 0
    n = len(samples)
    for epoch in range(cfg.epochs):
        lr = _lr_for_epoch(cfg, epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        order = _epoch_order(cfg.seed, epoch, n)
        for lo in range(0, n, cfg.batch_size):
            ids = order[lo : lo + cfg.batch_size]
            batch_images = images_t[torch.as_tensor(ids, dtype=torch.long)]
            batch_boxes = [gt_boxes[i] for i in ids]
            batch_labels = [gt_labels[i] for i in ids]

            bb_final, neck = model.forward_features(batch_images)
            rpn_out = model.rpn_forward(neck)
            own_props = det.rpn_propose(det_cfg, rpn_out, k=dcfg.num_proposals)
            own_props = [
                det.label_proposals(p, b, l, cfg.iou_pos)
                for p, b, l in zip(own_props, batch_boxes, batch_labels)
            ]
            pooled = det.pool_proposals(neck, own_props, det_cfg)
            logits, deltas = model.head_forward(pooled)
            l_cls, l_reg = det.head_loss(det_cfg, logits, deltas, own_props)
            l_rpn = det.rpn_loss(det_cfg, rpn_out, batch_boxes)
            total = l_cls + l_reg + l_rpn

            zero = total.new_zeros(())
            l_fea_obj = l_fea_bg = l_cls_pos = l_cls_neg = zero
            if distilling:
                l_fea_obj, l_fea_bg = _feature_terms(
                    neck, bb_final, ids, cache, fea_masks, bb_masks, adapt_layer, dcfg
                )
                l_cls_pos, l_cls_neg = _cls_terms(
                    model, teacher, neck, ids, cache, own_props, dcfg, det_cfg
                )
                total = total + l_fea_obj + l_fea_bg + l_cls_pos + l_cls_neg

            if not torch.isfinite(total):
                raise DivergenceError(
                    f"non-finite total loss at iteration {step}",
                    record={"iter": step, "epoch": epoch, "lr": lr},
                )
            opt.zero_grad()
            total.backward()
            opt.step()

            if step % log_every == 0:
                log.append(
                    iter=step,
                    L_cls_gt=float(l_cls.detach()),
                    L_reg=float(l_reg.detach()),
                    L_rpn=float(l_rpn.detach()),
                    L_fea_obj=float(l_fea_obj.detach()),
                    L_fea_bg=float(l_fea_bg.detach()),
                    L_cls_pos=float(l_cls_pos.detach()),
                    L_cls_neg=float(l_cls_neg.detach()),
                    lr=lr,
                )
            step += 1

    model.eval()
    if adapt_layer is not None:
        adapt_layer.eval()
    metadata = {
        "iterations": step,
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "final_train_loss": float(total.detach()),
    }
    return model, adapt_layer, log, metadata


def _feature_terms(neck, bb_final, ids, cache, fea_masks, bb_masks, adapt_layer, dcfg):
    """Neck (and optional backbone) imitation terms for one batch.

    Per-level losses are averaged over levels; the backbone term is added on
    top.  Returns (object_term, background_term); uniform mode reports its
    whole value as the object term.  The uniform mode is mask-free by
    definition; ``mask_kind`` shapes the decoupled and backbone masks only.
    """
    zero = neck[0].new_zeros(())
    obj = bg = zero
    n_levels = len(neck)
    if dcfg.neck_mode != "none":
        t_feats = [cache.neck[lv][ids] for lv in range(n_levels)]
        if dcfg.neck_mode == "all":
            total = zero
            for lv in range(n_levels):
                adapted = adapt(adapt_layer, neck[lv], lv)
                total = total + uniform_feature_loss(
                    adapted, t_feats[lv], dcfg.gamma, mask=None
                )
            obj = obj + total / n_levels
        else:  # decoupled
            o_sum = b_sum = zero
            for lv in range(n_levels):
                adapted = adapt(adapt_layer, neck[lv], lv)
                mask = torch.as_tensor(fea_masks[lv][ids], dtype=neck[0].dtype)
                o, b = decoupled_feature_terms(
                    adapted, t_feats[lv], mask, dcfg.alpha_obj, dcfg.alpha_bg
                )
                o_sum, b_sum = o_sum + o, b_sum + b
            obj = obj + o_sum / n_levels
            bg = bg + b_sum / n_levels
    if dcfg.distill_backbone:
        adapted_bb = adapt(adapt_layer, bb_final, len(adapt_layer.projections) - 1)
        mask = torch.as_tensor(bb_masks[ids], dtype=neck[0].dtype)
        o, b = decoupled_feature_terms(
            adapted_bb, cache.backbone[ids], mask, dcfg.alpha_obj, dcfg.alpha_bg
        )
        obj = obj + o
        bg = bg + b
    return obj, bg


def _cls_terms(model, teacher, neck, ids, cache, own_props, dcfg, det_cfg):
    """Proposal-classification transfer terms for one batch.

    Proposals come from the teacher by default (the shared-proposal scheme)
    and are concatenated across the batch before normalising by the positive
    and negative counts.  Returns (positive_term, negative_term); the
    undecoupled mode reports its single term in the positive slot.
    """
    zero = neck[0].new_zeros(())
    if dcfg.cls_mode == "none":
        return zero, zero
    if dcfg.proposal_source == "teacher":
        props = [cache.proposals[i] for i in ids]
        teacher_logits = torch.cat([cache.head_logits[i] for i in ids])
    else:
        props = own_props
        # teacher opinions on the student's proposals, via cached teacher neck
        with torch.no_grad():
            t_neck = [cache.neck[lv][ids] for lv in range(len(neck))]
            pooled_t = det.pool_proposals(t_neck, props, det_cfg)
            teacher_logits, _ = teacher.head_forward(pooled_t)
    pooled_s = det.pool_proposals(neck, props, det_cfg)
    student_logits, _ = model.head_forward(pooled_s)
    if student_logits.shape[0] == 0:
        return zero, zero
    if dcfg.cls_mode == "all":
        return uniform_cls_kl(student_logits, teacher_logits.detach(), dcfg.lam), zero
    labels = np.concatenate([p.labels for p in props])
    return decoupled_cls_terms(
        student_logits, teacher_logits.detach(), labels, dcfg
    )


def train_teacher(samples, det_cfg, cfg: TrainConfig):
    """Supervised training of a (typically wide) detector, no distillation."""
    if cfg.distill.active:
        raise ConfigurationError("teacher training must not configure distillation")
    model, _, log, metadata = run_training(samples, det_cfg, cfg)
    return model, log, metadata


train_student = train_teacher  # a baseline student is trained the same way


def distill_student(samples, det_cfg, cfg: TrainConfig, teacher):
    """Train a student against a frozen teacher per ``cfg.distill``."""
    teacher.config.require_teacher_of(det_cfg)
    return run_training(samples, det_cfg, cfg, teacher=teacher)


def sweep_coefficient(samples, val_samples, det_cfg, base_cfg: TrainConfig, teacher,
                      parameter: str, values, seeds):
    """Re-run distillation for each value×seed; returns rows of
    (value, seed, map50) plus per-value means."""
    from .evaluation import compute_map, predict_dataset

    if not hasattr(base_cfg.distill, parameter):
        raise ConfigurationError(f"unknown DistillConfig field {parameter!r}")
    rows = []
    for value in values:
        per_seed = []
        for seed in seeds:
            cfg = replace(
                base_cfg, seed=seed, distill=replace(base_cfg.distill, **{parameter: value})
            )
            model, _, _, _ = run_training(samples, det_cfg, cfg, teacher=teacher)
            dets = predict_dataset(model, val_samples)
            result = compute_map(
                dets, [(s.boxes(), s.labels()) for s in val_samples], (0.5,)
            )
            per_seed.append(result.map50)
            rows.append({"parameter": parameter, "value": value, "seed": seed,
                         "map50": result.map50})
        rows.append({"parameter": parameter, "value": value, "seed": "mean",
                     "map50": float(np.mean(per_seed))})
    return rows
