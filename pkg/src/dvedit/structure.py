"""Per-frame structure extractors (stand-ins for depth or pose estimators)."""

from __future__ import annotations

from typing import Callable, Protocol

import torch
from torch import Tensor

MASK_THRESHOLD = 0.5


class StructureExtractor(Protocol):
    def __call__(self, frames: Tensor) -> Tensor:
        """Map ``(F, 3, H, W)`` frames in ``[-1, 1]`` to ``(F, S, H, W)`` maps in ``[0, 1]``."""


def _check_frames(frames: Tensor) -> None:
    if frames.dim() != 4 or frames.shape[0] == 0:
        raise ValueError(f"expected non-empty (F, C, H, W) frames, got {tuple(frames.shape)}")


def extract_mask(frames: Tensor, threshold: float = MASK_THRESHOLD) -> Tensor:
    """Foreground mask: pixels whose colour departs from the background colour.

    The background colour is the per-channel median of each frame, which holds
    as long as the foreground covers less than half of the canvas.
    """
    _check_frames(frames)
    background = frames.flatten(2).median(dim=-1).values[:, :, None, None]
    diff = (frames - background).abs().amax(dim=1, keepdim=True)
    return (diff > threshold).to(torch.float32)


def extract_edges(frames: Tensor) -> Tensor:
    """Gradient-magnitude map from forward differences of the grey image, scaled to ``[0, 1]``."""
    _check_frames(frames)
    grey = frames.to(torch.float64).mean(dim=1, keepdim=True)
    gx = torch.zeros_like(grey)
    gy = torch.zeros_like(grey)
    gx[..., :, :-1] = grey[..., :, 1:] - grey[..., :, :-1]
    gy[..., :-1, :] = grey[..., 1:, :] - grey[..., :-1, :]
    mag = torch.sqrt(gx**2 + gy**2)
    peak = mag.flatten(1).amax(dim=1)[:, None, None, None]
    return torch.where(peak > 0, mag / peak.clamp_min(1e-12), mag).to(torch.float32)


EXTRACTORS: dict[str, Callable[[Tensor], Tensor]] = {"mask": extract_mask, "edge": extract_edges}


def register_extractor(name: str, fn: StructureExtractor) -> None:
    EXTRACTORS[name] = fn


def extract_structure(frames: Tensor, kind: str = "mask") -> Tensor:
    try:
        fn = EXTRACTORS[kind]
    except KeyError:
        raise ValueError(f"unknown structure extractor {kind!r}; known: {sorted(EXTRACTORS)}") from None
    return fn(frames)
