"""Stage-wise training: content first, then structure and motion against frozen content.

Each stage owns exactly one trainable parameter set. The content UNet is put
in ``requires_grad=False`` for the second-stage runs; every step checks that
no gradient reached it and the run ends by comparing content hashes.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import torch
from torch import Tensor, nn

from .data import ClipDataset
from .denoiser import ContentUNet, ModelConfig, MotionModule, StructureAdapter, parameter_hash
from .diffusion import NoiseSchedule, add_noise
from .text import TOKEN_IDS, NULL_TOKEN

logger = logging.getLogger(__name__)

STAGES = ("I", "II-A", "II-B")


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


class FreezeViolationError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    steps: int = 200
    seed: int = 0
    optimizer: str = "sgd"
    condition_dropout: float = 0.1
    log_every: int = 100
    min_timestep: int = 0  # training timesteps are drawn uniformly from [min_timestep, T)

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size < 1 or self.steps < 1:
            raise ValueError(f"invalid training config {self}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.condition_dropout < 1.0:
            raise ValueError("condition_dropout must be in [0, 1)")
        if self.min_timestep < 0:
            raise ValueError("min_timestep must be >= 0")


@dataclass
class StageReport:
    stage: str
    final_loss: float
    losses: list[float]
    frozen_hashes_before: dict[str, str]
    frozen_hashes_after: dict[str, str]
    trained_hash: str
    max_frozen_grad: float = 0.0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> StageReport:
        return cls(**d)


@dataclass
class LatentData:
    """Training tensors: latents ``(N, F, C, h, w)``, tokens ``(N, L)``, masks ``(N, F, 1, H, W)``."""

    latents: Tensor
    tokens: Tensor
    structures: Optional[Tensor] = None

    def __post_init__(self):
        if self.latents.dim() != 5:
            raise ValueError(f"latents must be (N, F, C, h, w), got {tuple(self.latents.shape)}")
        if self.latents.shape[0] == 0:
            raise ValueError("empty dataset")
        if self.tokens.shape[0] != self.latents.shape[0]:
            raise ValueError("one token sequence per clip required")
        if self.structures is not None and self.structures.shape[:2] != self.latents.shape[:2]:
            raise ValueError("structures must align with latents clip-for-clip and frame-for-frame")

    @classmethod
    def from_clips(cls, clips: ClipDataset) -> LatentData:
        return cls(clips.latents(), clips.tokens.clone(), clips.structures())

    @classmethod
    def from_sequences(cls, clips: Sequence[Tensor], tokens: Tensor) -> LatentData:
        lengths = {c.shape[0] for c in clips}
        if len(lengths) != 1:
            raise ValueError(f"ragged clip lengths {sorted(lengths)}; every clip needs the same frame count")
        return cls(torch.stack(list(clips)), tokens)


@dataclass
class Batch:
    x0: Tensor
    tokens: Tensor
    structures: Optional[Tensor] = None


def sample_batch(data: LatentData, config: TrainConfig, generator: torch.Generator, video: bool) -> Batch:
    """Draw a batch of frames (or whole clips when ``video``), with null-condition dropout."""
    n, nf = data.latents.shape[:2]
    if video:
        idx = torch.randint(n, (config.batch_size,), generator=generator)
        x0, clip = data.latents[idx], idx
        s = data.structures[idx] if data.structures is not None else None
    else:
        flat = torch.randint(n * nf, (config.batch_size,), generator=generator)
        clip, frame = flat // nf, flat % nf
        x0 = data.latents[clip, frame]
        s = data.structures[clip, frame] if data.structures is not None else None
    tokens = data.tokens[clip].clone()
    drop = torch.rand(config.batch_size, generator=generator) < config.condition_dropout
    tokens[drop] = TOKEN_IDS[NULL_TOKEN]
    return Batch(x0, tokens, s)


Predictor = Callable[[Tensor, Tensor, Tensor, Optional[Tensor]], Tensor]


def noise_estimation_loss(
    predictor: Predictor, batch: Batch, sched: NoiseSchedule, generator: torch.Generator, min_timestep: int = 0
) -> Tensor:
    """Mean squared error between injected noise and its prediction.

    Image batches ``(N, C, h, w)`` average over every element. Video batches
    ``(N, F, C, h, w)`` average within each frame and sum over frames; one
    timestep is drawn per clip, uniformly from ``[min_timestep, T)``.
    """
    x0 = batch.x0
    if x0.numel() == 0 or x0.shape[0] == 0:
        raise ValueError("empty batch")
    if not 0 <= min_timestep < sched.num_timesteps:
        raise ValueError(f"min_timestep {min_timestep} outside [0, {sched.num_timesteps})")
    t = torch.randint(min_timestep, sched.num_timesteps, (x0.shape[0],), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = add_noise(x0, eps, t, sched)
    err = (predictor(x_t, t, batch.tokens, batch.structures) - eps) ** 2
    if x0.dim() == 5:
        return err.mean(dim=(0, 2, 3, 4)).sum()
    return err.mean()


def content_predictor(content: ContentUNet) -> Predictor:
    def predict(x_t, t, tokens, structures=None):
        if x_t.dim() == 5:
            b, nf = x_t.shape[:2]
            eps = content(x_t.flatten(0, 1), t.repeat_interleave(nf), tokens.repeat_interleave(nf, dim=0))
            return eps.reshape(x_t.shape)
        return content(x_t, t, tokens)

    return predict


def structured_predictor(content: ContentUNet, adapter: StructureAdapter) -> Predictor:
    def predict(x_t, t, tokens, structures):
        context = content.embed(tokens)
        return content(x_t, t, context, residuals=adapter(x_t, t, context, structures))

    return predict


def video_predictor(content: ContentUNet, motion: MotionModule) -> Predictor:
    def predict(x_t, t, tokens, structures=None):
        b, nf = x_t.shape[:2]
        eps = content(
            x_t.flatten(0, 1),
            t.repeat_interleave(nf),
            tokens.repeat_interleave(nf, dim=0),
            motion=motion,
            num_frames=nf,
        )
        return eps.reshape(x_t.shape)

    return predict


def _optimizer(params, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.learning_rate)
    return torch.optim.SGD(params, lr=config.learning_rate, momentum=0.0)


def _set_trainable(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)
        p.grad = None


def _max_grad(module: nn.Module) -> float:
    grads = [p.grad.abs().max() for p in module.parameters() if p.grad is not None]
    return float(max(grads)) if grads else 0.0


def _run(
    stage: str,
    trained: nn.Module,
    frozen: Optional[ContentUNet],
    predictor: Predictor,
    data: LatentData,
    config: TrainConfig,
    sched: NoiseSchedule,
    video: bool,
) -> StageReport:
    generator = torch.Generator().manual_seed(config.seed)
    _set_trainable(trained, True)
    before = {}
    if frozen is not None:
        _set_trainable(frozen, False)
        before = {"content": parameter_hash(frozen)}
    opt = _optimizer([p for p in trained.parameters()], config)
    losses: list[float] = []
    max_frozen_grad = 0.0
    try:
        for step in range(config.steps):
            batch = sample_batch(data, config, generator, video)
            loss = noise_estimation_loss(predictor, batch, sched, generator, config.min_timestep)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDivergedError(step, value)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if frozen is not None:
                g = _max_grad(frozen)
                if g != 0.0:
                    raise FreezeViolationError(f"stage {stage}: content gradient {g} at step {step}")
                max_frozen_grad = max(max_frozen_grad, g)
            opt.step()
            losses.append(value)
            if config.log_every and (step + 1) % config.log_every == 0:
                window = losses[-config.log_every :]
                logger.info("stage %s step %d loss %.4f", stage, step + 1, sum(window) / len(window))
    finally:
        _set_trainable(trained, False)
    after = {}
    if frozen is not None:
        after = {"content": parameter_hash(frozen)}
        if after != before:
            raise FreezeViolationError(f"stage {stage}: content weights changed during training")
    return StageReport(
        stage=stage,
        final_loss=losses[-1],
        losses=losses,
        frozen_hashes_before=before,
        frozen_hashes_after=after,
        trained_hash=parameter_hash(trained),
        max_frozen_grad=max_frozen_grad,
        config=asdict(config),
    )


def train_stage1(
    data: LatentData,
    config: TrainConfig,
    sched: NoiseSchedule,
    model_config: ModelConfig = ModelConfig(),
    content: Optional[ContentUNet] = None,
) -> tuple[ContentUNet, StageReport]:
    """Train the text-to-image content UNet on frames treated independently."""
    if content is None:
        torch.manual_seed(config.seed)
        content = ContentUNet(model_config)
    report = _run("I", content, None, content_predictor(content), data, config, sched, video=False)
    return content, report


def train_stage2a(
    data: LatentData,
    content: ContentUNet,
    config: TrainConfig,
    sched: NoiseSchedule,
    adapter: Optional[StructureAdapter] = None,
) -> tuple[StructureAdapter, StageReport]:
    """Train the structure adapter with the content UNet frozen."""
    if data.structures is None:
        raise ValueError("stage II-A needs structure maps")
    if adapter is None:
        torch.manual_seed(config.seed)
        adapter = StructureAdapter.from_content(content)
    predictor = structured_predictor(content, adapter)
    report = _run("II-A", adapter, content, predictor, data, config, sched, video=False)
    return adapter, report


def train_stage2b(
    data: LatentData,
    content: ContentUNet,
    config: TrainConfig,
    sched: NoiseSchedule,
    motion: Optional[MotionModule] = None,
) -> tuple[MotionModule, StageReport]:
    """Train the motion module on whole clips with the content UNet frozen."""
    if data.latents.shape[1] != content.config.num_frames:
        raise ValueError(f"clips have {data.latents.shape[1]} frames, model expects {content.config.num_frames}")
    if motion is None:
        torch.manual_seed(config.seed)
        motion = MotionModule(content.config, sched.alpha_bars)
    report = _run("II-B", motion, content, video_predictor(content, motion), data, config, sched, video=True)
    return motion, report
