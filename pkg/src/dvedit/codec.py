"""Exactly invertible pixel <-> latent projection and the resize policy."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import Tensor
import torch.nn.functional as F

PATCH = 8


def _dct_matrix(n: int) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(math.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    m[0] /= math.sqrt(2.0)
    return m


# Orthonormal 2-D DCT-II over an 8x8 patch, as a 64x64 matrix acting on
# row-major flattened patches.
_BASIS = torch.from_numpy(np.kron(_dct_matrix(PATCH), _dct_matrix(PATCH)))


def latent_channels(pixel_channels: int = 3) -> int:
    return pixel_channels * PATCH * PATCH


def _check_dims(h: int, w: int) -> None:
    if h % PATCH or w % PATCH:
        raise ValueError(f"frame size ({h}, {w}) is not divisible by {PATCH}")


def encode_latent(frames: Tensor) -> Tensor:
    """Frames ``(..., 3, H, W)`` to latents ``(..., 192, H/8, W/8)``.

    Each 8x8 patch of each colour channel is mapped by an orthonormal DCT, so the
    map is an isometry and :func:`decode_latent` inverts it exactly up to
    rounding. Computed in float64 and rounded once.
    """
    *lead, c, h, w = frames.shape
    _check_dims(h, w)
    hh, ww = h // PATCH, w // PATCH
    x = frames.to(torch.float64).reshape(*lead, c, hh, PATCH, ww, PATCH)
    x = x.movedim(-3, -2).reshape(*lead, c, hh, ww, PATCH * PATCH)
    z = x @ _BASIS.t()
    z = z.movedim(-1, -3).reshape(*lead, c * PATCH * PATCH, hh, ww)
    return z.to(frames.dtype)


def decode_latent(latents: Tensor) -> Tensor:
    """Inverse of :func:`encode_latent`."""
    *lead, cc, hh, ww = latents.shape
    if cc % (PATCH * PATCH):
        raise ValueError(f"latent channel count {cc} is not a multiple of {PATCH * PATCH}")
    c = cc // (PATCH * PATCH)
    z = latents.to(torch.float64).reshape(*lead, c, PATCH * PATCH, hh, ww).movedim(-3, -1)
    x = z @ _BASIS
    x = x.reshape(*lead, c, hh, ww, PATCH, PATCH).movedim(-2, -3).reshape(*lead, c, hh * PATCH, ww * PATCH)
    return x.to(latents.dtype)


def _round_to_multiple(value: float, base: int = PATCH) -> int:
    return max(base, int(round(value / base)) * base)


def resize_policy(height: int, width: int, short_side: int = 64, square_side: int = 64) -> tuple[int, int]:
    """Target ``(H, W)``: squares go to ``square_side``; otherwise the short side
    becomes ``short_side`` and the long side is scaled and rounded to a multiple of 8.
    """
    if height < 1 or width < 1:
        raise ValueError(f"invalid frame size ({height}, {width})")
    if height == width:
        return square_side, square_side
    scale = short_side / min(height, width)
    if height < width:
        return short_side, _round_to_multiple(width * scale)
    return _round_to_multiple(height * scale), short_side


# Full-scale presets; the desk-scale defaults above are what the toy models use.
FULL_SCALE_SHORT_SIDE = 320
FULL_SCALE_SQUARE_SIDE = 512


def resize_frames(frames: Tensor, size: tuple[int, int]) -> Tensor:
    """Area-resample ``(F, C, H, W)`` frames to ``size``."""
    if tuple(frames.shape[-2:]) == tuple(size):
        return frames
    return F.interpolate(frames, size=size, mode="area" if frames.shape[-1] >= size[1] else "bilinear", align_corners=None)
