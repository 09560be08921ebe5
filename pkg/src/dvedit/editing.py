"""Sampling, DDIM inversion and the four editing applications."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import torch
from torch import Tensor

from .codec import decode_latent, encode_latent
from .denoiser import ConditionLike, ContentUNet, ModelBundle, condition_context, predict_noise_video, swap_content
from .diffusion import (
    FINAL,
    GuidanceConfig,
    NoiseSchedule,
    TimestepPlan,
    add_noise,
    cfg_combine,
    ddim_invert_step,
    ddim_step,
    make_linear_schedule,
    make_timestep_plan,
)
from .structure import StructureExtractor
from .text import TextCondition

DEFAULT_SCHEDULE = make_linear_schedule()


class NonFiniteLatentError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite latent at inversion step {step}")
        self.step = step


@dataclass(frozen=True)
class SamplerConfig:
    """DDIM sampler settings.

    ``inversion_refinements`` is the number of fixed-point iterations per
    inversion step; see :func:`invert_video`.
    """

    steps: int = 25
    guidance_scale: float = 7.5
    seed: int = 0
    inversion_refinements: int = 3

    def __post_init__(self):
        if self.inversion_refinements < 0:
            raise ValueError("inversion_refinements must be >= 0")

    @property
    def guidance(self) -> GuidanceConfig:
        return GuidanceConfig(self.guidance_scale)

    def plan(self, sched: NoiseSchedule) -> TimestepPlan:
        return make_timestep_plan(sched.num_timesteps, self.steps)

    def with_scale(self, scale: float) -> SamplerConfig:
        return replace(self, guidance_scale=scale)


@dataclass(frozen=True)
class MagicMixSpec:
    c_src: TextCondition
    c_tgt: TextCondition
    k_min: float = 0.3
    k_max: float = 0.6
    nu: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.k_min < self.k_max <= 1.0:
            raise ValueError(f"need 0 <= k_min < k_max <= 1, got ({self.k_min}, {self.k_max})")
        if not 0.0 <= self.nu <= 1.0:
            raise ValueError(f"nu must be in [0, 1], got {self.nu}")

    def window(self, steps: int) -> tuple[int, int]:
        """Plan positions ``[start, mix_end)`` denoised under the mixed condition."""
        start = steps - round(self.k_max * steps)
        mix_end = steps - round(self.k_min * steps)
        if start >= steps:
            raise ValueError(f"k_max={self.k_max} leaves no denoising steps in a {steps}-step plan")
        return start, mix_end


@dataclass(frozen=True)
class OutpaintSpec:
    source_size: tuple[int, int]
    target_size: tuple[int, int]
    offset: tuple[int, int]  # (top, left) of the source inside the target, pixels
    condition: TextCondition
    release_steps: int = 3

    def __post_init__(self):
        (h, w), (ht, wt), (top, left) = self.source_size, self.target_size, self.offset
        for v in (h, w, ht, wt, top, left):
            if v % 8:
                raise ValueError(f"outpaint sizes and offsets must be multiples of 8, got {self}")
        if ht < h or wt < w:
            raise ValueError("target must be at least as large as the source on both axes")
        if top < 0 or left < 0 or top + h > ht or left + w > wt:
            raise ValueError(f"known region at {self.offset} of size {self.source_size} falls outside {self.target_size}")
        if self.release_steps < 0:
            raise ValueError("release_steps must be >= 0")

    def latent_region(self) -> tuple[slice, slice]:
        (h, w), (top, left) = self.source_size, self.offset
        return slice(top // 8, (top + h) // 8), slice(left // 8, (left + w) // 8)


@dataclass
class InversionTrajectory:
    timesteps: list[int]
    latents: list[Tensor]
    condition: TextCondition
    used_structure: bool = False

    def __len__(self) -> int:
        return len(self.latents)

    def at(self, t: int) -> Tensor:
        return self.latents[self.timesteps.index(t)]

    @property
    def terminal(self) -> Tensor:
        return self.latents[-1]


@dataclass
class EditResult:
    frames: Tensor
    latents: Tensor
    manifest: dict = field(default_factory=dict)
    history: list[Tensor] = field(default_factory=list)
    trajectory: Optional[InversionTrajectory] = None


def _manifest(kind: str, bundle: ModelBundle, cfg: SamplerConfig, sched: NoiseSchedule, **extra) -> dict:
    out = {
        "pipeline": kind,
        "sampler": asdict(cfg),
        "schedule": sched.to_dict(),
        "module_hashes": bundle.hashes(),
    }
    for k, v in extra.items():
        out[k] = str(v) if isinstance(v, TextCondition) else v
    return out


def guided_noise(
    bundle: ModelBundle, x: Tensor, t: int, context: Tensor, scale: float, s: Optional[Tensor], null_context: Optional[Tensor]
) -> Tensor:
    """Classifier-free guided prediction; at ``scale == 1`` the null branch is skipped."""
    eps_cond = predict_noise_video(bundle, x, t, context, s)
    if scale == 1.0:
        return eps_cond
    eps_uncond = predict_noise_video(bundle, x, t, null_context, s)
    return cfg_combine(eps_uncond, eps_cond, scale)


def _null_context(bundle: ModelBundle, scale: float) -> Optional[Tensor]:
    return None if scale == 1.0 else condition_context(bundle.content, TextCondition.null())


StepHook = Callable[[int, int, Tensor], Tensor]


@torch.no_grad()
def denoise(
    bundle: ModelBundle,
    x: Tensor,
    transitions: list[tuple[int, int]],
    c: ConditionLike,
    scale: float,
    sched: NoiseSchedule,
    s: Optional[Tensor] = None,
    before_step: Optional[StepHook] = None,
    contexts: Optional[list[Tensor]] = None,
) -> Tensor:
    """DDIM denoising over ``transitions``; ``contexts`` overrides the condition per step."""
    context = condition_context(bundle.content, c)
    null = _null_context(bundle, scale)
    for j, (t, t_prev) in enumerate(transitions):
        if before_step is not None:
            x = before_step(j, t, x)
        ctx = contexts[j] if contexts is not None else context
        eps = guided_noise(bundle, x, t, ctx, scale, s, null)
        x = ddim_step(x, eps, t, t_prev, sched)
    return x


def _frame_count_and_size(bundle: ModelBundle, s: Optional[Tensor], latent_size: tuple[int, int]) -> tuple[int, int, int]:
    if s is not None:
        return s.shape[0], s.shape[-2] // bundle.config.patch, s.shape[-1] // bundle.config.patch
    return bundle.config.num_frames, *latent_size


def initial_noise(shape: tuple[int, ...], seed: int) -> Tensor:
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed))


@torch.no_grad()
def sample_video(
    bundle: ModelBundle,
    c: ConditionLike,
    s: Optional[Tensor] = None,
    cfg: SamplerConfig = SamplerConfig(),
    sched: NoiseSchedule = DEFAULT_SCHEDULE,
    latent_size: tuple[int, int] = (8, 8),
    noise: Optional[Tensor] = None,
) -> Tensor:
    """Draw a latent clip ``(F, C, h, w)`` from seeded Gaussian noise."""
    if s is not None:
        bundle.require("structure")
    if noise is None:
        nf, h, w = _frame_count_and_size(bundle, s, latent_size)
        noise = initial_noise((nf, bundle.config.latent_channels, h, w), cfg.seed)
    return denoise(bundle, noise, cfg.plan(sched).transitions(), c, cfg.guidance_scale, sched, s)


@torch.no_grad()
def invert_video(
    bundle: ModelBundle,
    x0: Tensor,
    c_src: ConditionLike,
    cfg: SamplerConfig = SamplerConfig(),
    sched: NoiseSchedule = DEFAULT_SCHEDULE,
    s: Optional[Tensor] = None,
    depth: Optional[int] = None,
) -> InversionTrajectory:
    """Unguided DDIM inversion from ``x0`` up the plan, keeping every visited latent.

    Sampling maps ``x_next`` to ``x`` with the noise predicted at ``(x_next, t_next)``,
    so the exact inverse step is implicit in ``x_next``. It is solved by
    fixed-point iteration: start from the prediction at ``(x, t_next)``, then
    re-predict at the candidate ``x_next`` ``cfg.inversion_refinements`` times.
    ``depth`` limits the number of inversion steps (partial inversion); the
    default inverts fully.
    """
    if not torch.isfinite(x0).all():
        raise NonFiniteLatentError(0)
    transitions = cfg.plan(sched).inversion_transitions()
    if depth is not None:
        transitions = transitions[:depth]
    context = condition_context(bundle.content, c_src)
    x = x0
    timesteps, latents = [FINAL], [x0]
    for j, (t, t_next) in enumerate(transitions):
        eps = predict_noise_video(bundle, x, t_next, context, s)
        x_next = ddim_invert_step(x, eps, t, t_next, sched)
        for _ in range(cfg.inversion_refinements):
            eps = predict_noise_video(bundle, x_next, t_next, context, s)
            x_next = ddim_invert_step(x, eps, t, t_next, sched)
        x = x_next
        if not torch.isfinite(x).all():
            raise NonFiniteLatentError(j + 1)
        timesteps.append(t_next)
        latents.append(x)
    cond = c_src if isinstance(c_src, TextCondition) else TextCondition.null()
    return InversionTrajectory(timesteps, latents, cond, used_structure=s is not None)


def _encode(frames: Tensor) -> Tensor:
    return encode_latent(frames.to(torch.float32))


def stylize(
    source_frames: Tensor,
    extractor: StructureExtractor,
    bundle: ModelBundle,
    style_content: ContentUNet,
    c: TextCondition,
    cfg: SamplerConfig = SamplerConfig(),
    sched: NoiseSchedule = DEFAULT_SCHEDULE,
) -> EditResult:
    """Re-render a clip with swapped content weights, following its extracted structure."""
    s = extractor(source_frames)
    styled = swap_content(bundle, style_content)
    latents = sample_video(styled, c, s, cfg, sched)
    return EditResult(decode_latent(latents), latents, _manifest("stylize", styled, cfg, sched, condition=c))


def local_edit(
    bundle: ModelBundle,
    source_frames: Tensor,
    c_src: TextCondition,
    c_tgt: TextCondition,
    cfg: SamplerConfig = SamplerConfig(),
    sched: NoiseSchedule = DEFAULT_SCHEDULE,
    s: Optional[Tensor] = None,
    strength: float = 1.0,
) -> EditResult:
    """Invert under ``c_src`` (unguided), then denoise under ``c_tgt`` at the configured scale.

    ``strength < 1`` inverts only that fraction of the plan and denoises from there.
    """
    if not 0.0 < strength <= 1.0:
        raise ValueError("strength must be in (0, 1]")
    plan = cfg.plan(sched)
    depth = max(1, round(strength * plan.steps))
    traj = invert_video(bundle, _encode(source_frames), c_src, cfg, sched, s, depth=depth)
    transitions = plan.transitions()[plan.steps - depth :]
    latents = denoise(bundle, traj.terminal, transitions, c_tgt, cfg.guidance_scale, sched, s)
    manifest = _manifest("local_edit", bundle, cfg, sched, c_src=c_src, c_tgt=c_tgt, strength=strength)
    return EditResult(decode_latent(latents), latents, manifest)


def magicmix(
    bundle: ModelBundle,
    source_frames: Tensor,
    spec: MagicMixSpec,
    cfg: SamplerConfig = SamplerConfig(),
    sched: NoiseSchedule = DEFAULT_SCHEDULE,
    s: Optional[Tensor] = None,
) -> EditResult:
    """Noise the source to ``k_max`` of the plan, denoise under the interpolated
    condition down to ``k_min``, then under ``c_tgt`` alone."""
    plan = cfg.plan(sched)
    start, mix_end = spec.window(plan.steps)
    x0 = _encode(source_frames)
    x = add_noise(x0, initial_noise(tuple(x0.shape), cfg.seed), plan.indices[start], sched)
    with torch.no_grad():
        e_src = condition_context(bundle.content, spec.c_src)
        e_tgt = condition_context(bundle.content, spec.c_tgt)
        mixed = (1.0 - spec.nu) * e_src + spec.nu * e_tgt
    contexts = [mixed if j < mix_end else e_tgt for j in range(start, plan.steps)]
    latents = denoise(bundle, x, plan.transitions()[start:], spec.c_tgt, cfg.guidance_scale, sched, s, contexts=contexts)
    manifest = _manifest(
        "magicmix", bundle, cfg, sched, c_src=spec.c_src, c_tgt=spec.c_tgt, k_min=spec.k_min, k_max=spec.k_max, nu=spec.nu
    )
    return EditResult(decode_latent(latents), latents, manifest)


def outpaint(
    bundle: ModelBundle,
    source_frames: Tensor,
    spec: OutpaintSpec,
    cfg: SamplerConfig = SamplerConfig(),
    sched: NoiseSchedule = DEFAULT_SCHEDULE,
) -> EditResult:
    """Grow the canvas: denoise fresh noise while re-imposing inverted source latents.

    The known region is overwritten with the matching inversion latent before
    every step except the last ``release_steps``. With no release window the
    clean source latent is also re-imposed after the final step.
    ``history`` holds the latent fed to each step, then the final latent.
    """
    if tuple(source_frames.shape[-2:]) != tuple(spec.source_size):
        raise ValueError(f"source frames are {tuple(source_frames.shape[-2:])}, spec says {spec.source_size}")
    plan = cfg.plan(sched)
    if spec.release_steps >= plan.steps:
        raise ValueError(f"release_steps={spec.release_steps} must be below the plan length {plan.steps}")
    traj = invert_video(bundle, _encode(source_frames), spec.condition, cfg, sched)
    nf = source_frames.shape[0]
    h_out, w_out = spec.target_size[0] // 8, spec.target_size[1] // 8
    noise = initial_noise((nf, bundle.config.latent_channels, h_out, w_out), cfg.seed)
    rows, cols = spec.latent_region()
    replace_until = plan.steps - spec.release_steps
    history: list[Tensor] = []

    def composite(j: int, t: int, x: Tensor) -> Tensor:
        if j < replace_until:
            x = x.clone()
            x[..., rows, cols] = traj.at(t)
        history.append(x)
        return x

    latents = denoise(bundle, noise, plan.transitions(), spec.condition, cfg.guidance_scale, sched, before_step=composite)
    if spec.release_steps == 0:
        latents = latents.clone()
        latents[..., rows, cols] = traj.at(FINAL)
    history.append(latents)
    manifest = _manifest(
        "outpaint",
        bundle,
        cfg,
        sched,
        condition=spec.condition,
        source_size=list(spec.source_size),
        target_size=list(spec.target_size),
        offset=list(spec.offset),
        release_steps=spec.release_steps,
    )
    return EditResult(decode_latent(latents), latents, manifest, history, traj)
