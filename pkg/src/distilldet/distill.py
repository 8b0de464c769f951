"""Distillation losses: feature imitation and proposal-classification transfer.

Two families, each in a uniform and a decoupled variant:

* Feature level — squared error between adapted student and teacher neck
  maps, either averaged over every cell with one scale ``gamma`` or split
  into object/background regions by a binary mask with separate
  ``alpha_obj`` / ``alpha_bg`` normalised by their own cell counts.
* Proposal level — KL divergence between temperature-softened class
  posteriors on a shared proposal set, either one ``lam``-weighted term over
  all proposals or positives and negatives split with their own coefficients
  and temperatures.

All losses are pure functions of torch tensors, non-negative, and zero when
the (adapted) student equals the teacher.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError
from .masks import BinaryMask

NECK_MODES = ("none", "all", "decoupled")
CLS_MODES = ("none", "all", "decoupled")
MASK_KINDS = ("gt", "random", "all_one")
PROPOSAL_SOURCES = ("teacher", "student")


@dataclass
class DistillConfig:
    """Scales, temperatures, and mode switches for distillation."""

    neck_mode: str = "decoupled"
    cls_mode: str = "decoupled"
    distill_backbone: bool = False
    mask_kind: str = "gt"
    gamma: float = 4.0
    lam: float = 1.0
    alpha_obj: float = 4.0
    alpha_bg: float = 16.0
    beta_obj: float = 0.05
    beta_bg: float = 2.0
    t_obj: float = 3.0
    t_bg: float = 1.0
    softmax_includes_bg: bool = False
    proposal_source: str = "teacher"
    num_proposals: int = 64

    def validate(self):
        if self.neck_mode not in NECK_MODES:
            raise ConfigurationError(f"neck_mode must be one of {NECK_MODES}")
        if self.cls_mode not in CLS_MODES:
            raise ConfigurationError(f"cls_mode must be one of {CLS_MODES}")
        if self.mask_kind not in MASK_KINDS:
            raise ConfigurationError(f"mask_kind must be one of {MASK_KINDS}")
        if self.proposal_source not in PROPOSAL_SOURCES:
            raise ConfigurationError(
                f"proposal_source must be one of {PROPOSAL_SOURCES}"
            )
        if self.t_obj <= 0 or self.t_bg <= 0:
            raise ConfigurationError("temperatures must be strictly positive")
        for name in ("gamma", "lam", "alpha_obj", "alpha_bg", "beta_obj", "beta_bg"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.num_proposals < 1:
            raise ConfigurationError("num_proposals must be >= 1")

    @property
    def active(self) -> bool:
        """Whether any distillation term is switched on."""
        return (
            self.neck_mode != "none"
            or self.cls_mode != "none"
            or self.distill_backbone
        )


class AdaptLayer(nn.Module):
    """Per-level 1×1 projections from student to teacher channel counts.

    Square projections start as the identity (rectangular ones as a
    truncated identity) so the initial distillation signal compares raw
    student features against the teacher.
    """

    def __init__(self, in_channels, out_channels):
        super().__init__()
        ins = list(in_channels)
        outs = list(out_channels)
        if len(ins) != len(outs):
            raise ConfigurationError("need one (in, out) channel pair per level")
        self.projections = nn.ModuleList(
            nn.Conv2d(ci, co, kernel_size=1) for ci, co in zip(ins, outs)
        )
        for proj in self.projections:
            with torch.no_grad():
                proj.weight.zero_()
                k = min(proj.in_channels, proj.out_channels)
                proj.weight[range(k), range(k), 0, 0] = 1.0
                proj.bias.zero_()

    def forward(self, features):
        """Project a list of per-level [B, C, H, W] tensors."""
        if len(features) != len(self.projections):
            raise ConfigurationError(
                f"got {len(features)} feature levels, layer has "
                f"{len(self.projections)}"
            )
        return [proj(f) for proj, f in zip(self.projections, features)]


def adapt(layer: AdaptLayer, s: torch.Tensor, level: int = 0) -> torch.Tensor:
    """Apply one level's projection to a [B, C, H, W] or [C, H, W] tensor."""
    squeeze = s.dim() == 3
    if squeeze:
        s = s.unsqueeze(0)
    out = layer.projections[level](s)
    return out.squeeze(0) if squeeze else out


def _as_bchw(x) -> torch.Tensor:
    x = torch.as_tensor(x)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise ValueError(f"expected [B, C, H, W] or [C, H, W], got {tuple(x.shape)}")
    return x


def _as_mask_tensor(mask, like: torch.Tensor) -> torch.Tensor:
    """Coerce a mask (BinaryMask / array / tensor) to [B, H, W] matching ``like``."""
    if isinstance(mask, BinaryMask):
        mask = mask.values
    m = torch.as_tensor(np.asarray(mask), dtype=like.dtype, device=like.device)
    if m.dim() == 2:
        m = m.unsqueeze(0).expand(like.shape[0], -1, -1)
    if m.shape != (like.shape[0], like.shape[2], like.shape[3]):
        raise ValueError(
            f"mask shape {tuple(m.shape)} does not match features "
            f"{tuple(like.shape)}"
        )
    return m


def uniform_feature_loss(s_adapted, t, gamma: float, mask=None) -> torch.Tensor:
    """Mean squared imitation error over all cells: (γ / 2N)·Σ I·(S − T)².

    ``N`` is the full element count H·W·C per image; with ``mask=None`` the
    indicator is all-ones.  Batched inputs average the per-image losses.
    """
    s = _as_bchw(s_adapted)
    t = _as_bchw(t)
    if s.shape != t.shape:
        raise ValueError(f"shape mismatch {tuple(s.shape)} vs {tuple(t.shape)}")
    diff2 = (s - t) ** 2
    if mask is not None:
        diff2 = diff2 * _as_mask_tensor(mask, s).unsqueeze(1)
    n = s.shape[1] * s.shape[2] * s.shape[3]
    per_image = diff2.sum(dim=(1, 2, 3)) / (2.0 * n)
    return gamma * per_image.mean()


def decoupled_feature_terms(s_adapted, t, mask, alpha_obj: float, alpha_bg: float):
    """Object and background imitation terms, each normalised by its own
    element count; an empty region contributes exactly 0."""
    s = _as_bchw(s_adapted)
    t = _as_bchw(t)
    if s.shape != t.shape:
        raise ValueError(f"shape mismatch {tuple(s.shape)} vs {tuple(t.shape)}")
    m = _as_mask_tensor(mask, s)
    c = s.shape[1]
    diff2 = (s - t) ** 2
    obj_sum = (diff2 * m.unsqueeze(1)).sum(dim=(1, 2, 3))
    bg_sum = (diff2 * (1.0 - m).unsqueeze(1)).sum(dim=(1, 2, 3))
    n_obj = c * m.sum(dim=(1, 2))
    n_bg = c * (1.0 - m).sum(dim=(1, 2))
    # an all-zero region has a zero sum, so the clamp never changes a value
    obj = alpha_obj * (obj_sum / (2.0 * n_obj.clamp(min=1.0))).mean()
    bg = alpha_bg * (bg_sum / (2.0 * n_bg.clamp(min=1.0))).mean()
    return obj, bg


def decoupled_feature_loss(s_adapted, t, mask, alpha_obj: float, alpha_bg: float):
    obj, bg = decoupled_feature_terms(s_adapted, t, mask, alpha_obj, alpha_bg)
    return obj + bg


def softened_probs(z, temperature: float) -> torch.Tensor:
    """Temperature-softened softmax over the last axis."""
    if temperature <= 0:
        raise ConfigurationError("temperature must be strictly positive")
    z = torch.as_tensor(z, dtype=torch.float64 if not torch.is_tensor(z) else None)
    if not torch.isfinite(z).all():
        raise ValueError("logits must be finite")
    return torch.softmax(z / temperature, dim=-1)


def kl_distill(p_s, p_t, temperature: float) -> torch.Tensor:
    """Temperature-scaled KL divergence: T²·Σ p_t·log(p_t / p_s).

    The T² factor restores the gradient magnitude lost to softening.
    Entries with p_t = 0 contribute 0; p_s must be strictly positive
    (softmax outputs always are).
    """
    p_s = torch.as_tensor(p_s, dtype=torch.float64 if not torch.is_tensor(p_s) else None)
    p_t = torch.as_tensor(p_t, dtype=torch.float64 if not torch.is_tensor(p_t) else None)
    if p_s.shape != p_t.shape:
        raise ValueError("distributions must have equal shape")
    if (p_s <= 0).any():
        raise ValueError("p_s has a non-positive entry; KL is undefined")
    tiny = torch.finfo(p_t.dtype).tiny
    terms = p_t * (torch.log(p_t.clamp(min=tiny)) - torch.log(p_s))
    return (temperature**2) * terms.sum(dim=-1)


def _kl_rows(z_s: torch.Tensor, z_t: torch.Tensor, temperature: float) -> torch.Tensor:
    """Row-wise softened KL from logits; [K, C] → [K]."""
    log_ps = torch.log_softmax(z_s / temperature, dim=-1)
    log_pt = torch.log_softmax(z_t / temperature, dim=-1)
    return (temperature**2) * (log_pt.exp() * (log_pt - log_ps)).sum(dim=-1)


def _class_slice(logits: torch.Tensor, include_bg: bool) -> torch.Tensor:
    """Distilled class columns: all C+1 or the C foreground ones (bg = 0)."""
    return logits if include_bg else logits[..., 1:]


def decoupled_cls_terms(student_logits, teacher_logits, labels, cfg: DistillConfig):
    """Positive and negative proposal-classification KL terms.

    Positives (label 1) are softened at ``t_obj`` and scaled by
    ``beta_obj / K_obj``; negatives at ``t_bg`` by ``beta_bg / K_bg``.  An
    empty side contributes 0.
    """
    z_s = torch.as_tensor(student_logits)
    z_t = torch.as_tensor(teacher_logits)
    if z_s.shape != z_t.shape:
        raise ValueError("student/teacher logits must align over proposals")
    labels = torch.as_tensor(np.asarray(labels)).bool()
    zero = torch.zeros((), dtype=z_s.dtype, device=z_s.device)
    if z_s.shape[0] == 0:
        warnings.warn("no proposals to distill; classification loss is 0")
        return zero, zero
    z_s = _class_slice(z_s, cfg.softmax_includes_bg)
    z_t = _class_slice(z_t, cfg.softmax_includes_bg)
    pos, neg = zero, zero
    k_obj = int(labels.sum())
    k_bg = int(labels.numel()) - k_obj
    if k_obj:
        rows = _kl_rows(z_s[labels], z_t[labels], cfg.t_obj)
        pos = cfg.beta_obj / k_obj * rows.sum()
    if k_bg:
        rows = _kl_rows(z_s[~labels], z_t[~labels], cfg.t_bg)
        neg = cfg.beta_bg / k_bg * rows.sum()
    return pos, neg


def decoupled_cls_loss(student_logits, teacher_logits, labels, cfg: DistillConfig):
    pos, neg = decoupled_cls_terms(student_logits, teacher_logits, labels, cfg)
    return pos + neg


def uniform_cls_kl(student_logits, teacher_logits, lam: float) -> torch.Tensor:
    """Undecoupled head transfer: (λ/K)·Σ KL over the full posterior at T=1."""
    z_s = torch.as_tensor(student_logits)
    z_t = torch.as_tensor(teacher_logits)
    if z_s.shape != z_t.shape:
        raise ValueError("student/teacher logits must align over proposals")
    if z_s.shape[0] == 0:
        warnings.warn("no proposals to distill; classification loss is 0")
        return torch.zeros((), dtype=z_s.dtype, device=z_s.device)
    return lam * _kl_rows(z_s, z_t, 1.0).mean()


def baseline_cls_loss(student_logits, teacher_logits, gt_labels, lam: float):
    """Ground-truth cross-entropy plus λ-weighted teacher KL, both at T=1."""
    z_s = torch.as_tensor(student_logits)
    gt = torch.as_tensor(np.asarray(gt_labels), dtype=torch.long, device=z_s.device)
    ce = nn.functional.cross_entropy(z_s, gt, reduction="mean")
    return ce + uniform_cls_kl(z_s, teacher_logits, lam)
