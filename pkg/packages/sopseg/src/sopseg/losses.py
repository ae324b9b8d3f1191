import math
from dataclasses import dataclass
from typing import Dict, Optional

import torch
import torch.nn.functional as F

from sopseg.api import ShapeError
from sopseg.config import LossConfig
from sopseg.decoder import PyramidOutputs

SCALES = (1, 2, 4)


def gaussian_kernel3(sigma: float, dtype=torch.float32, device=None) -> torch.Tensor:
    """Normalized 3x3 Gaussian as a (1, 1, 3, 3) conv weight."""
    offsets = torch.tensor([-1.0, 0.0, 1.0], dtype=dtype, device=device)
    k1 = torch.exp(-offsets ** 2 / (2 * sigma ** 2))
    k2 = torch.outer(k1, k1)
    return (k2 / k2.sum()).view(1, 1, 3, 3)


def _as_nchw(mask: torch.Tensor) -> torch.Tensor:
    if mask.dim() == 2:
        return mask[None, None]
    if mask.dim() == 3:
        return mask[:, None]
    if mask.dim() == 4 and mask.shape[1] == 1:
        return mask
    raise ShapeError(f"Expected a (H, W), (B, H, W) or (B, 1, H, W) mask, got {tuple(mask.shape)}")


def boundary_map(mask: torch.Tensor) -> torch.Tensor:
    """3x3 morphological gradient (dilation minus erosion); pixels outside the map count as background."""
    m = _as_nchw(mask).float()
    padded = F.pad(m, (1, 1, 1, 1), value=0.0)
    dilation = F.max_pool2d(padded, kernel_size=3, stride=1)
    erosion = 1.0 - F.max_pool2d(1.0 - padded, kernel_size=3, stride=1)
    return (dilation - erosion).view_as(mask)


def edge_target(mask: torch.Tensor, sigma: float = 1.0) -> torch.Tensor:
    """Soft boundary map in [0, 1]: morphological gradient smoothed by a 3x3 Gaussian."""
    boundary = _as_nchw(boundary_map(mask))
    kernel = gaussian_kernel3(sigma, dtype=boundary.dtype, device=boundary.device)
    smoothed = F.conv2d(boundary, kernel, padding=1)
    return smoothed.clamp(0.0, 1.0).view(mask.shape).to(mask.dtype if mask.is_floating_point() else torch.float32)


def dice_term(logits: torch.Tensor, target: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """1 - soft Dice, computed per sample over the trailing two dimensions and averaged."""
    p = torch.sigmoid(logits)
    dims = (-2, -1)
    intersection = (p * target).sum(dim=dims)
    denominator = p.sum(dim=dims) + target.sum(dim=dims) + eps
    return (1.0 - 2.0 * intersection / denominator).mean()


def bce_dice(logits: torch.Tensor, target: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    if logits.shape != target.shape:
        raise ShapeError(f"Prediction {tuple(logits.shape)} and target {tuple(target.shape)} differ")
    target = target.to(logits.dtype)
    return F.binary_cross_entropy_with_logits(logits, target) + dice_term(logits, target, eps)


def iou_loss(p_iou: torch.Tensor, actual_iou: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    return F.smooth_l1_loss(p_iou, actual_iou.to(p_iou.dtype), beta=beta)


def batch_mask_iou(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-sample IoU of binary (B, H, W) maps; 1.0 when both are empty."""
    pred, target = pred.bool(), target.bool()
    intersection = (pred & target).flatten(1).sum(1).double()
    union = (pred | target).flatten(1).sum(1).double()
    return torch.where(union > 0, intersection / union.clamp(min=1), torch.ones_like(union))


def downsample_mask(mask: torch.Tensor, factor: int) -> torch.Tensor:
    """Bilinear (antialiased) downsampling of a (B, H, W) binary mask, re-thresholded at 0.5."""
    if factor == 1:
        return mask
    side = mask.shape[-1] // factor
    resized = F.interpolate(mask[:, None].float(), size=(side, side), mode='bilinear',
                            align_corners=False, antialias=True)
    return (resized[:, 0] > 0.5).to(mask.dtype)


@dataclass
class LossBreakdown:
    mask: Dict[int, torch.Tensor]
    edge: Dict[int, torch.Tensor]
    iou: torch.Tensor
    lambda_iou: float
    total: torch.Tensor

    @staticmethod
    def combine(mask: Dict[int, torch.Tensor], edge: Dict[int, torch.Tensor], iou: torch.Tensor,
                lambda_iou: float) -> torch.Tensor:
        total = lambda_iou * iou
        for scale in SCALES:
            total = total + (mask[scale] + edge[scale])
        return total

    def as_dict(self) -> Dict[str, float]:
        result = {}
        for scale in SCALES:
            result[f"mask_{scale}"] = float(self.mask[scale])
            result[f"edge_{scale}"] = float(self.edge[scale])
        result['iou'] = float(self.iou)
        result['total'] = float(self.total)
        return result

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_dict().values())


def multi_scale_loss(outputs: PyramidOutputs, gt_mask: torch.Tensor, cfg: LossConfig,
                     actual_iou: Optional[torch.Tensor] = None) -> LossBreakdown:
    """Joint mask, edge and quality loss over the 1/1, 1/2 and 1/4 predictions.

    Args:
        outputs: model outputs, `p_iou` must be set
        gt_mask: (B, s_in, s_in) binary ground truth at patch resolution
        cfg: loss weights and switches
        actual_iou: quality target; computed from the thresholded full-resolution mask when omitted
    """
    if gt_mask.shape != outputs.p1.shape[:1] + outputs.p1.shape[2:]:
        raise ShapeError(f"Ground truth {tuple(gt_mask.shape)} does not match predictions {tuple(outputs.p1.shape)}")
    gt = gt_mask.to(outputs.p1.dtype)
    mask_losses: Dict[int, torch.Tensor] = {}
    edge_losses: Dict[int, torch.Tensor] = {}
    for scale, prediction in outputs.scales():
        target = downsample_mask(gt, scale)
        mask_losses[scale] = bce_dice(prediction[:, 0], target, cfg.dice_eps)
        if cfg.edge_supervision:
            edges = edge_target(target, cfg.edge_sigma)
            edge_losses[scale] = bce_dice(prediction[:, 1], edges, cfg.dice_eps)
        else:
            edge_losses[scale] = torch.zeros((), dtype=prediction.dtype, device=prediction.device)

    if actual_iou is None:
        actual_iou = batch_mask_iou(outputs.masks(), gt > 0.5)
    quality = iou_loss(outputs.p_iou, actual_iou.detach(), cfg.smooth_l1_beta)
    total = LossBreakdown.combine(mask_losses, edge_losses, quality, cfg.lambda_iou)
    return LossBreakdown(mask=mask_losses, edge=edge_losses, iou=quality, lambda_iou=cfg.lambda_iou, total=total)
