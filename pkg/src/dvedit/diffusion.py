"""Linear-beta noise schedule, forward noising, deterministic DDIM and guidance.

All functions are pure. Tensor arithmetic follows the dtype of the inputs, so
the same code runs in float32 for sampling and in float64 for gradient checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
import torch
from torch import Tensor

# Sentinel timestep for the clean end of a trajectory; its alpha_bar is 1.
FINAL = -1

Timestep = Union[int, Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    beta_start: float
    beta_end: float
    num_timesteps: int
    betas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    def alpha_bar(self, t: int) -> float:
        """Cumulative alpha at ``t``; ``FINAL`` maps to exactly 1."""
        if t == FINAL:
            return 1.0
        if not 0 <= t < self.num_timesteps:
            raise ValueError(f"timestep {t} outside [0, {self.num_timesteps - 1}]")
        return float(self.alpha_bars[t])

    def to_dict(self) -> dict:
        return {
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "num_timesteps": self.num_timesteps,
        }


def make_linear_schedule(beta_start: float = 1e-4, beta_end: float = 2e-2, num_timesteps: int = 1000) -> NoiseSchedule:
    if not isinstance(num_timesteps, (int, np.integer)) or num_timesteps < 1:
        raise ValueError(f"num_timesteps must be a positive integer, got {num_timesteps!r}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, int(num_timesteps), dtype=np.float64)
    if num_timesteps > 1:
        betas[0], betas[-1] = beta_start, beta_end
    alpha_bars = np.cumprod(1.0 - betas)
    betas.setflags(write=False)
    alpha_bars.setflags(write=False)
    return NoiseSchedule(float(beta_start), float(beta_end), int(num_timesteps), betas, alpha_bars)


@dataclass(frozen=True)
class TimestepPlan:
    """Descending, uniformly strided subset of training timesteps."""

    indices: tuple[int, ...]

    @property
    def steps(self) -> int:
        return len(self.indices)

    def transitions(self) -> list[tuple[int, int]]:
        """``(t, t_prev)`` pairs for sampling; the last pair ends at ``FINAL``."""
        nxt = list(self.indices[1:]) + [FINAL]
        return list(zip(self.indices, nxt))

    def inversion_transitions(self) -> list[tuple[int, int]]:
        """``(t, t_next)`` pairs for inversion, starting from ``FINAL``."""
        return [(b, a) for a, b in reversed(self.transitions())]


def make_timestep_plan(num_timesteps: int = 1000, steps: int = 25) -> TimestepPlan:
    if not 1 <= steps <= num_timesteps:
        raise ValueError(f"need 1 <= steps <= num_timesteps, got steps={steps}, T={num_timesteps}")
    stride = num_timesteps // steps
    return TimestepPlan(tuple(num_timesteps - 1 - k * stride for k in range(steps)))


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 7.5

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError(f"guidance scale must be >= 0, got {self.scale}")

    @property
    def uses_null_condition(self) -> bool:
        # At w == 1 the unconditional branch cancels out exactly.
        return self.scale != 1.0


def _check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _per_sample(values: Tensor, like: Tensor) -> Tensor:
    return values.to(like.dtype).reshape(-1, *([1] * (like.dim() - 1)))


def add_noise(x0: Tensor, eps: Tensor, t: Timestep, sched: NoiseSchedule) -> Tensor:
    """Forward process sample ``sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps``.

    ``t`` is either a single timestep or a 1-D tensor with one timestep per
    leading-dim entry of ``x0``.
    """
    _check_same_shape(x0, eps, "add_noise")
    if isinstance(t, Tensor) and t.dim() > 0:
        if t.shape[0] != x0.shape[0]:
            raise ValueError(f"add_noise: {t.shape[0]} timesteps for batch of {x0.shape[0]}")
        if int(t.min()) < 0 or int(t.max()) >= sched.num_timesteps:
            raise ValueError("add_noise: timestep out of range")
        ab = torch.from_numpy(sched.alpha_bars.copy())[t.long().cpu()]
        return _per_sample(ab.sqrt(), x0) * x0 + _per_sample((1.0 - ab).sqrt(), x0) * eps
    t = int(t)
    if not 0 <= t < sched.num_timesteps:
        raise ValueError(f"add_noise: timestep {t} outside [0, {sched.num_timesteps - 1}]")
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def _ddim_transfer(x: Tensor, eps_hat: Tensor, ab_from: float, ab_to: float) -> Tensor:
    x0_hat = (x - math.sqrt(1.0 - ab_from) * eps_hat) / math.sqrt(ab_from)
    return math.sqrt(ab_to) * x0_hat + math.sqrt(1.0 - ab_to) * eps_hat


def ddim_step(x_t: Tensor, eps_hat: Tensor, t: int, t_prev: int, sched: NoiseSchedule) -> Tensor:
    """One deterministic DDIM denoising step from ``t`` down to ``t_prev``."""
    _check_same_shape(x_t, eps_hat, "ddim_step")
    if t == FINAL or t_prev >= t:
        raise ValueError(f"ddim_step needs t > t_prev, got t={t}, t_prev={t_prev}")
    return _ddim_transfer(x_t, eps_hat, sched.alpha_bar(t), sched.alpha_bar(t_prev))


def ddim_invert_step(x_t: Tensor, eps_hat: Tensor, t: int, t_next: int, sched: NoiseSchedule) -> Tensor:
    """Inverse of :func:`ddim_step`: move a latent from ``t`` up to ``t_next``."""
    _check_same_shape(x_t, eps_hat, "ddim_invert_step")
    if t_next == FINAL or t_next <= t:
        raise ValueError(f"ddim_invert_step needs t_next > t, got t={t}, t_next={t_next}")
    return _ddim_transfer(x_t, eps_hat, sched.alpha_bar(t), sched.alpha_bar(t_next))


def cfg_combine(eps_uncond: Tensor, eps_cond: Tensor, w: float) -> Tensor:
    """``eps_uncond + w * (eps_cond - eps_uncond)``; 0-dim operands broadcast."""
    eps_uncond, eps_cond = torch.as_tensor(eps_uncond), torch.as_tensor(eps_cond)
    if eps_uncond.dim() and eps_cond.dim():
        _check_same_shape(eps_uncond, eps_cond, "cfg_combine")
    if w < 0:
        raise ValueError(f"guidance scale must be >= 0, got {w}")
    if w == 1.0:
        # a + (b - a) is not always bit-equal to b in floating point
        return torch.broadcast_tensors(eps_cond, eps_uncond)[0].clone()
    return eps_uncond + w * (eps_cond - eps_uncond)
