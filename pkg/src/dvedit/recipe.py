"""End-to-end toy recipe: generate clips, then run the three training stages."""

from __future__ import annotations

import logging
from typing import Optional

from .config import RunConfig
from .data import ClipDataset, generate_dataset
from .denoiser import ContentUNet, ModelBundle
from .training import LatentData, train_stage1, train_stage2a, train_stage2b

logger = logging.getLogger(__name__)


def toy_dataset(cfg: RunConfig) -> ClipDataset:
    return generate_dataset(cfg.data.count, cfg.data.seed, cfg.data.distribution())


def train_bundle(
    clips: ClipDataset, cfg: RunConfig, content: Optional[ContentUNet] = None, stages: tuple[str, ...] = ("I", "II-A", "II-B")
) -> ModelBundle:
    """Train the requested stages in order; ``content`` skips stage I when given."""
    sched = cfg.schedule.build()
    data = LatentData.from_clips(clips)
    reports = []
    if content is None or "I" in stages:
        content, r = train_stage1(data, cfg.stage1, sched, cfg.model, content)
        reports.append(r.to_dict())
        logger.info("stage I final loss %.4f", r.final_loss)
    adapter = motion = None
    if "II-A" in stages:
        adapter, r = train_stage2a(data, content, cfg.stage2a, sched)
        reports.append(r.to_dict())
        logger.info("stage II-A final loss %.4f", r.final_loss)
    if "II-B" in stages:
        motion, r = train_stage2b(data, content, cfg.stage2b, sched)
        reports.append(r.to_dict())
        logger.info("stage II-B final loss %.4f", r.final_loss)
    content.requires_grad_(False)
    frozen = {"content": True, "structure": False, "motion": False}
    return ModelBundle(content, adapter, motion, frozen, reports)
