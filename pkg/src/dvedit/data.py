"""Synthetic moving-shape clips with exact ground-truth masks."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import Tensor

from .codec import encode_latent
from .text import BACKGROUNDS, COLORS, SHAPES, TextCondition

# RGB in [-1, 1]. Every shape colour sits >= 1.5 away from both backgrounds on
# at least one channel, far above the texture amplitude.
COLOR_VALUES = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
    "magenta": (1.0, -1.0, 1.0),
    "cyan": (-1.0, 1.0, 1.0),
}
BACKGROUND_VALUES = {"dark": (-0.6, -0.6, -0.6), "light": (0.5, 0.5, 0.5)}


class InfeasibleClipError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticClipSpec:
    height: int = 64
    width: int = 64
    shape: str = "square"
    color: str = "red"
    background: str = "dark"
    size: int = 18
    start: tuple[int, int] = (8, 8)  # (y, x) of the shape's bounding box at frame 0
    velocity: tuple[int, int] = (0, 0)  # (vx, vy) in pixels per frame
    num_frames: int = 16
    texture_seed: int = 0
    texture_amplitude: float = 0.12

    @property
    def condition(self) -> TextCondition:
        return TextCondition.from_words(self.shape, self.color, self.background)

    def positions(self) -> list[tuple[int, int]]:
        vx, vy = self.velocity
        y0, x0 = self.start
        return [(y0 + k * vy, x0 + k * vx) for k in range(self.num_frames)]

    def validate(self) -> None:
        if self.shape not in SHAPES or self.color not in COLORS or self.background not in BACKGROUNDS:
            raise ValueError(f"unknown shape/color/background in {self}")
        for y, x in self.positions():
            if y < 0 or x < 0 or y + self.size > self.height or x + self.size > self.width:
                raise InfeasibleClipError(f"shape leaves the {self.height}x{self.width} canvas at ({y}, {x})")


def shape_stencil(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "disk":
        c = (size - 1) / 2
        return (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2) ** 2
    if shape == "triangle":
        # apex at the top centre, base on the bottom row
        half_width = (yy + 1) * (size / 2) / size
        return np.abs(xx - (size - 1) / 2) <= half_width
    raise ValueError(f"unknown shape {shape!r}")


def background_texture(spec: SyntheticClipSpec) -> np.ndarray:
    """Static smooth field in ``[-amplitude, amplitude]``, fixed per clip."""
    rng = np.random.default_rng(spec.texture_seed)
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    field_ = np.zeros((spec.height, spec.width))
    for _ in range(3):
        fy, fx = rng.uniform(-1.5, 1.5, size=2) * 2 * np.pi / max(spec.height, spec.width)
        field_ += np.cos(fy * yy + fx * xx + rng.uniform(0, 2 * np.pi))
    return spec.texture_amplitude * field_ / 3.0


def to_uint8(frames: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((frames + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(frames: Tensor) -> Tensor:
    return frames.to(torch.float32) / 127.5 - 1.0


def render_clip(spec: SyntheticClipSpec) -> tuple[np.ndarray, np.ndarray]:
    """Render ``(F, 3, H, W)`` uint8 frames and ``(F, 1, H, W)`` bool masks."""
    spec.validate()
    bg = np.asarray(BACKGROUND_VALUES[spec.background])[:, None, None] + background_texture(spec)[None]
    color = np.asarray(COLOR_VALUES[spec.color])[:, None, None]
    stencil = shape_stencil(spec.shape, spec.size)
    frames = np.empty((spec.num_frames, 3, spec.height, spec.width), dtype=np.uint8)
    masks = np.zeros((spec.num_frames, 1, spec.height, spec.width), dtype=bool)
    for k, (y, x) in enumerate(spec.positions()):
        masks[k, 0, y : y + spec.size, x : x + spec.size] = stencil
        frames[k] = to_uint8(np.where(masks[k], color, bg))
    return frames, masks


@dataclass(frozen=True)
class ClipDistribution:
    height: int = 64
    width: int = 64
    num_frames: int = 16
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = COLORS
    backgrounds: tuple[str, ...] = BACKGROUNDS
    size_range: tuple[int, int] = (14, 22)
    max_speed: int = 2
    texture_amplitude: float = 0.12

    def sample(self, rng: np.random.Generator) -> SyntheticClipSpec:
        size = int(rng.integers(self.size_range[0], self.size_range[1] + 1))
        span = self.num_frames - 1
        while True:
            vx, vy = (int(v) for v in rng.integers(-self.max_speed, self.max_speed + 1, size=2))
            room_y = self.height - size - abs(vy) * span
            room_x = self.width - size - abs(vx) * span
            if room_y >= 0 and room_x >= 0:
                break
        y = int(rng.integers(0, room_y + 1)) + (abs(vy) * span if vy < 0 else 0)
        x = int(rng.integers(0, room_x + 1)) + (abs(vx) * span if vx < 0 else 0)
        return SyntheticClipSpec(
            height=self.height,
            width=self.width,
            shape=str(rng.choice(self.shapes)),
            color=str(rng.choice(self.colors)),
            background=str(rng.choice(self.backgrounds)),
            size=size,
            start=(y, x),
            velocity=(vx, vy),
            num_frames=self.num_frames,
            texture_seed=int(rng.integers(2**31)),
            texture_amplitude=self.texture_amplitude,
        )


@dataclass
class ClipDataset:
    """Clips as uint8 frames ``(N, F, 3, H, W)``, bool masks ``(N, F, 1, H, W)`` and tokens ``(N, 3)``."""

    frames: Tensor
    masks: Tensor
    tokens: Tensor
    specs: list[SyntheticClipSpec] = field(default_factory=list)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def num_frames(self) -> int:
        return self.frames.shape[1]

    def pixels(self, idx=slice(None)) -> Tensor:
        return from_uint8(self.frames[idx])

    def structures(self, idx=slice(None)) -> Tensor:
        return self.masks[idx].to(torch.float32)

    def condition(self, i: int) -> TextCondition:
        return TextCondition(tuple(int(v) for v in self.tokens[i]))

    def latents(self) -> Tensor:
        return encode_latent(self.pixels())

    def subset(self, idx) -> ClipDataset:
        idx = list(range(len(self))[idx]) if isinstance(idx, slice) else list(idx)
        specs = [self.specs[i] for i in idx] if self.specs else []
        return ClipDataset(self.frames[idx], self.masks[idx], self.tokens[idx], specs)

    def spec_dicts(self) -> list[dict]:
        return [asdict(s) for s in self.specs]


def generate_dataset(count: int, seed: int = 0, distribution: ClipDistribution = ClipDistribution()) -> ClipDataset:
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    specs = [distribution.sample(rng) for _ in range(count)]
    return dataset_from_specs(specs)


def dataset_from_specs(specs: list[SyntheticClipSpec]) -> ClipDataset:
    rendered = [render_clip(s) for s in specs]
    frames = torch.from_numpy(np.stack([f for f, _ in rendered]))
    masks = torch.from_numpy(np.stack([m for _, m in rendered]))
    tokens = torch.tensor([s.condition.token_ids for s in specs], dtype=torch.long)
    return ClipDataset(frames, masks, tokens, list(specs))
