"""Structure IoU, temporal flicker and outpainting seam statistics."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
from torch import Tensor

from .structure import extract_mask


@dataclass(frozen=True)
class KnownRegion:
    """Pixel box ``[top, top + height) x [left, left + width)`` inside a larger canvas."""

    top: int
    left: int
    height: int
    width: int


@dataclass
class MetricsReport:
    iou_per_frame: list[float]
    iou: float
    flicker: float
    seam_gradient: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def structure_iou(generated_masks: Tensor, reference_masks: Tensor) -> Tensor:
    """Per-frame IoU of binary masks ``(F, 1, H, W)``; two empty masks count as 1."""
    a = generated_masks > 0.5
    b = reference_masks > 0.5
    inter = (a & b).flatten(1).sum(1).to(torch.float64)
    union = (a | b).flatten(1).sum(1).to(torch.float64)
    return torch.where(union > 0, inter / union.clamp_min(1), torch.ones_like(union))


def temporal_flicker(frames: Tensor, reference_masks: Optional[Tensor] = None) -> float:
    """Mean absolute inter-frame difference over pixels that are background in both frames."""
    if frames.shape[0] < 2:
        return 0.0
    diff = (frames[1:].to(torch.float64) - frames[:-1].to(torch.float64)).abs().mean(dim=1, keepdim=True)
    if reference_masks is None:
        return float(diff.mean())
    static = (reference_masks[1:] < 0.5) & (reference_masks[:-1] < 0.5)
    count = int(static.sum())
    return float(diff[static].sum() / count) if count else 0.0


def seam_gradient(frames: Tensor, region: KnownRegion, band: int = 2) -> float:
    """Mean absolute pixel step across the known/unknown border, within ``band`` px of it.

    Only border sides that lie inside the canvas contribute.
    """
    x = frames.to(torch.float64)
    h, w = x.shape[-2:]
    steps = []
    top, left = region.top, region.left
    bottom, right = top + region.height, left + region.width
    col = slice(left, right)
    row = slice(top, bottom)
    for edge in (top, bottom):
        if 0 < edge < h:
            lo, hi = max(edge - band, 0), min(edge + band, h)
            steps.append((x[..., lo + 1 : hi, col] - x[..., lo : hi - 1, col]).abs().flatten())
    for edge in (left, right):
        if 0 < edge < w:
            lo, hi = max(edge - band, 0), min(edge + band, w)
            steps.append((x[..., row, lo + 1 : hi] - x[..., row, lo : hi - 1]).abs().flatten())
    if not steps:
        return 0.0
    return float(torch.cat(steps).mean())


def compute_metrics(
    generated: Tensor, reference_structures: Tensor, known_region: Optional[KnownRegion] = None
) -> MetricsReport:
    """Metrics for one clip of ``(F, 3, H, W)`` frames against ``(F, 1, H, W)`` masks."""
    if generated.shape[0] != reference_structures.shape[0]:
        raise ValueError(f"{generated.shape[0]} frames vs {reference_structures.shape[0]} structure maps")
    ious = structure_iou(extract_mask(generated.clamp(-1, 1)), reference_structures)
    return MetricsReport(
        iou_per_frame=[float(v) for v in ious],
        iou=float(ious.mean()),
        flicker=temporal_flicker(generated, reference_structures),
        seam_gradient=None if known_region is None else seam_gradient(generated, known_region),
    )
