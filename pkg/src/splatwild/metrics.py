"""Image-quality and mask-quality metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .masking import mask_iou, ssim_map

__all__ = ["INF_PSNR", "MetricReport", "psnr", "ssim_mean", "mask_iou", "report"]

# PSNR of identical images
INF_PSNR = math.inf


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    mask_iou: Optional[float] = None

    def psnr_text(self) -> str:
        return "inf" if math.isinf(self.psnr) else repr(self.psnr)


def psnr(a, b) -> float:
    """10 log10(1 / MSE) over all pixels and channels; identical images give ``INF_PSNR``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return INF_PSNR
    return 10.0 * math.log10(1.0 / mse)


def ssim_mean(a, b) -> float:
    return float(np.mean(ssim_map(np.asarray(a, float), np.asarray(b, float))))


def report(pred, gt, pred_mask=None, gt_mask=None) -> MetricReport:
    iou = None
    if pred_mask is not None and gt_mask is not None:
        iou = mask_iou(pred_mask, gt_mask)
    return MetricReport(psnr(pred, gt), ssim_mean(pred, gt), iou)
