"""Training objectives for registration, segmentation and their coupling.

Sums over the image domain are taken as voxel means so that the default
weights behave the same at every resolution.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from . import fields
from .errors import ConfigError, ContractViolation, NumericFault
from .network import LABEL_VARIANTS, SEG_HEAD_VARIANTS, VARIANTS

__all__ = [
    "LossConfig",
    "LossReport",
    "dice_loss",
    "focal_dice",
    "focal_loss",
    "fuse_loss",
    "ncc_loss",
    "njd_loss",
    "one_hot",
    "seg_loss",
    "smooth_loss",
    "total_loss",
]

NCC_EPS = 1e-5
DICE_EPS = 1e-5
LOG_CLAMP = 1e-7


@dataclass
class LossConfig:
    lambda_njd: float = 1e-5
    lambda_seg: float = 0.5
    lambda_fuse: float = 1.0
    ncc_window: int = 9
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    num_classes: int = 4

    def __post_init__(self):
        if min(self.lambda_njd, self.lambda_seg, self.lambda_fuse) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.ncc_window < 1 or self.ncc_window % 2 == 0:
            raise ConfigError("ncc_window must be a positive odd integer")
        if self.focal_gamma < 0:
            raise ConfigError("focal_gamma must be >= 0")
        if not 0 < self.focal_alpha < 1:
            raise ConfigError("focal_alpha must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    total: torch.Tensor
    sim: torch.Tensor
    smooth: torch.Tensor
    njd: torch.Tensor
    seg: torch.Tensor
    fuse: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(v.detach()) for k, v in self.__dict__.items()}


def _box_sum(x: torch.Tensor, n: int) -> torch.Tensor:
    kernel = torch.ones((1, 1, n, n, n), dtype=x.dtype, device=x.device)
    return F.conv3d(x, kernel, padding=n // 2)


def ncc_loss(fixed: torch.Tensor, warped: torch.Tensor, n: int = 9) -> torch.Tensor:
    """Negative mean squared local correlation over ``n``-cubed windows.

    Windows are truncated at the volume border (statistics use only voxels
    inside the image), so the value is invariant to positive affine
    intensity maps everywhere, not just in the interior.
    """
    if fixed.shape != warped.shape:
        raise ContractViolation(f"ncc_loss: shapes differ {tuple(fixed.shape)} vs {tuple(warped.shape)}")
    if n % 2 == 0:
        raise ContractViolation("ncc_loss: window size must be odd")
    if fixed.shape[1] != 1:
        raise ContractViolation("ncc_loss: expects single-channel volumes")
    count = _box_sum(torch.ones_like(fixed), n)
    sf, sw = _box_sum(fixed, n), _box_sum(warped, n)
    sff, sww, sfw = _box_sum(fixed * fixed, n), _box_sum(warped * warped, n), _box_sum(fixed * warped, n)
    cross = sfw - sf * sw / count
    var_f = (sff - sf * sf / count).clamp(min=0)
    var_w = (sww - sw * sw / count).clamp(min=0)
    cc = cross * cross / (var_f * var_w + NCC_EPS)
    return -cc.mean()


def _valid_diffs(field: torch.Tensor):
    return [torch.diff(field, dim=axis) for axis in (2, 3, 4)]


def smooth_loss(field: torch.Tensor) -> torch.Tensor:
    """Mean squared Frobenius norm of the displacement gradient (forward differences)."""
    total = field.new_zeros(())
    for d in _valid_diffs(field):
        if d.numel():
            total = total + d.pow(2).sum(dim=1).mean()
    return total


def njd_loss(field: torch.Tensor) -> torch.Tensor:
    """Mean of ``0.5 * (|det J| - det J)``: penalises only folded voxels."""
    det = fields.jacobian_det(field)
    return (0.5 * (det.abs() - det)).mean()


def one_hot(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """``[N,1,D,H,W]`` integer labels to a ``[N,K,D,H,W]`` float one-hot tensor."""
    if labels.dim() == 5:
        labels = labels[:, 0]
    oh = F.one_hot(labels.long(), num_classes).permute(0, 4, 1, 2, 3)
    return oh.to(torch.get_default_dtype())


def dice_loss(target: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    """Negative mean soft Dice over the channels given (pass foreground channels only).

    The denominator is floored at a small epsilon, so two empty masks score 0
    and identical non-empty binary masks score exactly -1.
    """
    if target.shape != pred.shape:
        raise ContractViolation(f"dice_loss: shapes differ {tuple(target.shape)} vs {tuple(pred.shape)}")
    dims = (0, *range(2, target.dim()))
    inter = (target * pred).sum(dim=dims)
    denom = (target.sum(dim=dims) + pred.sum(dim=dims)).clamp(min=DICE_EPS)
    return -(2.0 * inter / denom).mean()


def focal_loss(
    target: torch.Tensor,
    pred: torch.Tensor,
    gamma: float = 2.0,
    alpha: float | None = 0.25,
) -> torch.Tensor:
    """Mean over voxels of ``-sum_c t_c a_c (1 - p_c)^gamma log p_c``.

    ``a_c`` is ``1 - alpha`` for the background channel 0 and ``alpha``
    otherwise; ``alpha=None`` disables class weighting. For one-hot targets
    this is the usual ``-a_t (1 - p_t)^gamma log p_t``.
    """
    if target.shape != pred.shape:
        raise ContractViolation(f"focal_loss: shapes differ {tuple(target.shape)} vs {tuple(pred.shape)}")
    p = pred.clamp(min=LOG_CLAMP)
    term = target * (1 - pred).clamp(min=0).pow(gamma) * -torch.log(p)
    if alpha is not None:
        w = torch.full((target.shape[1],), alpha, dtype=pred.dtype, device=pred.device)
        w[0] = 1 - alpha
        term = term * w.view(1, -1, *([1] * (target.dim() - 2)))
    return term.sum(dim=1).mean()


def focal_dice(target: torch.Tensor, pred: torch.Tensor, cfg: LossConfig | None = None) -> torch.Tensor:
    cfg = cfg or LossConfig()
    return focal_loss(target, pred, cfg.focal_gamma, cfg.focal_alpha) + dice_loss(target[:, 1:], pred[:, 1:])


def seg_loss(labels_m, labels_f, seg_m, seg_f, cfg: LossConfig | None = None) -> torch.Tensor:
    return focal_dice(labels_m, seg_m, cfg) + focal_dice(labels_f, seg_f, cfg)


def fuse_loss(labels_f, labels_m, field, seg_m=None, seg_f=None, cfg: LossConfig | None = None, labels_only=False):
    """Label / prediction agreement through the deformation.

    ``labels_*`` are one-hot ground truth; ``seg_*`` are predicted
    probabilities. One-hot channels are warped trilinearly so the terms stay
    differentiable in the field. ``labels_only`` keeps just the first term.
    """
    total = focal_dice(labels_f, fields.warp(labels_m, field), cfg)
    if labels_only:
        return total
    if seg_m is None or seg_f is None:
        raise ContractViolation("fuse_loss: variant needs predicted segmentations for the full fusion term")
    warped_seg = fields.warp(seg_m, field)
    return total + focal_dice(labels_f, warped_seg, cfg) + focal_dice(seg_f, warped_seg, cfg)


def total_loss(
    variant: str,
    fixed: torch.Tensor,
    moving: torch.Tensor,
    field: torch.Tensor,
    cfg: LossConfig | None = None,
    labels_m: torch.Tensor | None = None,
    labels_f: torch.Tensor | None = None,
    seg_m: torch.Tensor | None = None,
    seg_f: torch.Tensor | None = None,
) -> LossReport:
    """Weighted objective for one variant; label inputs are one-hot tensors."""
    if variant not in VARIANTS:
        raise ContractViolation(f"unknown variant {variant!r}")
    cfg = cfg or LossConfig()
    warped = fields.warp(moving, field)
    sim = ncc_loss(fixed, warped, cfg.ncc_window)
    smooth = smooth_loss(field)
    njd = njd_loss(field)
    zero = field.new_zeros(())
    seg = fuse = zero
    if variant in LABEL_VARIANTS:
        if labels_m is None or labels_f is None:
            raise ContractViolation(f"{variant} needs ground-truth labels")
        if variant in SEG_HEAD_VARIANTS:
            seg = seg_loss(labels_m, labels_f, seg_m, seg_f, cfg)
            fuse = fuse_loss(labels_f, labels_m, field, seg_m, seg_f, cfg)
        else:
            fuse = fuse_loss(labels_f, labels_m, field, cfg=cfg, labels_only=True)
    total = sim + smooth + cfg.lambda_njd * njd
    if variant in SEG_HEAD_VARIANTS:
        total = total + cfg.lambda_seg * seg
    if variant in LABEL_VARIANTS:
        total = total + cfg.lambda_fuse * fuse
    if not math.isfinite(float(total.detach())):
        raise NumericFault("total loss is not finite")
    return LossReport(total=total, sim=sim, smooth=smooth, njd=njd, seg=seg, fuse=fuse)
