"""Frame directories (lossless PNG, ``%05d`` indexed), dataset folders and JSON reports."""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path
from typing import Union

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .data import ClipDataset, SyntheticClipSpec, from_uint8, to_uint8

PathLike = Union[str, Path]


def save_frames(frames: Tensor, directory: PathLike) -> Path:
    """Write ``(F, 3, H, W)`` frames in ``[-1, 1]`` as RGB PNGs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pixels = frames if frames.dtype == torch.uint8 else torch.from_numpy(to_uint8(frames.detach().double().numpy()))
    for i, frame in enumerate(pixels):
        Image.fromarray(frame.permute(1, 2, 0).numpy(), mode="RGB").save(directory / f"{i:05d}.png")
    return directory


def load_frames_uint8(directory: PathLike) -> Tensor:
    paths = sorted(Path(directory).glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG frames in {directory}")
    arrays = [np.asarray(Image.open(p).convert("RGB")) for p in paths]
    return torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2).contiguous()


def load_frames(directory: PathLike) -> Tensor:
    return from_uint8(load_frames_uint8(directory))


def sample_clip(frames: Tensor, num_frames: int, interval: int = 1, start: int = 0) -> Tensor:
    """Take ``num_frames`` frames every ``interval`` frames from a longer sequence."""
    if interval < 1 or start < 0:
        raise ValueError("interval must be >= 1 and start >= 0")
    last = start + (num_frames - 1) * interval
    if last >= frames.shape[0]:
        raise ValueError(f"need {last + 1} frames for {num_frames} at interval {interval}, have {frames.shape[0]}")
    return frames[start : last + 1 : interval]


def save_masks(masks: Tensor, directory: PathLike) -> Path:
    """Write ``(F, 1, H, W)`` maps in ``[0, 1]`` as 8-bit greyscale PNGs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    values = (masks.detach().to(torch.float64).clamp(0, 1) * 255).round().to(torch.uint8)
    for i, m in enumerate(values):
        Image.fromarray(m[0].numpy(), mode="L").save(directory / f"{i:05d}.png")
    return directory


def load_masks(directory: PathLike) -> Tensor:
    paths = sorted(Path(directory).glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG maps in {directory}")
    arrays = [np.asarray(Image.open(p).convert("L")) for p in paths]
    return torch.from_numpy(np.stack(arrays)).to(torch.float32)[:, None] / 255.0


def write_json(obj, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def save_dataset(ds: ClipDataset, directory: PathLike) -> Path:
    directory = Path(directory)
    for i in range(len(ds)):
        clip_dir = directory / "clips" / f"{i:05d}"
        save_frames(ds.frames[i], clip_dir / "frames")
        save_masks(ds.masks[i].to(torch.float32), clip_dir / "masks")
        meta = {"tokens": [int(v) for v in ds.tokens[i]], "condition": str(ds.condition(i))}
        if ds.specs:
            meta["spec"] = asdict(ds.specs[i])
        write_json(meta, clip_dir / "clip.json")
    return directory


def load_dataset(directory: PathLike) -> ClipDataset:
    clip_dirs = sorted((Path(directory) / "clips").iterdir())
    if not clip_dirs:
        raise FileNotFoundError(f"no clips under {directory}")
    frames, masks, tokens, specs = [], [], [], []
    for d in clip_dirs:
        frames.append(load_frames_uint8(d / "frames"))
        masks.append(load_masks(d / "masks") > 0.5)
        meta = json.loads((d / "clip.json").read_text())
        tokens.append(meta["tokens"])
        if "spec" in meta:
            s = meta["spec"]
            specs.append(SyntheticClipSpec(**{**s, "start": tuple(s["start"]), "velocity": tuple(s["velocity"])}))
    lengths = {f.shape[0] for f in frames}
    if len(lengths) != 1:
        raise ValueError(f"clips have ragged frame counts {sorted(lengths)}")
    return ClipDataset(
        torch.stack(frames), torch.stack(masks), torch.tensor(tokens, dtype=torch.long), specs if len(specs) == len(frames) else []
    )
