"""JSON run configuration: schedule, model, data, training, sampler and edit settings.

Schema (all sections optional; missing keys take the defaults below)::

    {
      "schedule": {"beta_start": 1e-4, "beta_end": 0.02, "num_timesteps": 1000},
      "model":    {ModelConfig fields},
      "data":     {"count": 512, "seed": 0, "height": 64, "width": 64, "num_frames": 16,
                   "size_range": [14, 22], "max_speed": 2, "texture_amplitude": 0.12,
                   "frame_interval": 1},
      "training": {"stage1": {TrainConfig fields}, "stage2a": {...}, "stage2b": {...}},
      "sampler":  {"steps": 25, "guidance_scale": 7.5, "seed": 0, "inversion_refinements": 3},
      "edit":     {"strength": 1.0, "k_min": 0.3, "k_max": 0.6, "nu": 0.5, "release_steps": 3,
                   "extractor": "mask"}
    }

Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Iterable, Optional, Union

from .data import ClipDistribution
from .denoiser import ModelConfig
from .diffusion import NoiseSchedule, make_linear_schedule
from .editing import SamplerConfig
from .training import TrainConfig


@dataclass(frozen=True)
class ScheduleConfig:
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    num_timesteps: int = 1000

    def build(self) -> NoiseSchedule:
        return make_linear_schedule(self.beta_start, self.beta_end, self.num_timesteps)


@dataclass(frozen=True)
class DataConfig:
    count: int = 512
    seed: int = 0
    height: int = 64
    width: int = 64
    num_frames: int = 16
    size_range: tuple[int, int] = (14, 22)
    max_speed: int = 2
    texture_amplitude: float = 0.12
    frame_interval: int = 1  # stride when cutting clips from longer external frame sequences

    def distribution(self) -> ClipDistribution:
        return ClipDistribution(
            height=self.height,
            width=self.width,
            num_frames=self.num_frames,
            size_range=tuple(self.size_range),
            max_speed=self.max_speed,
            texture_amplitude=self.texture_amplitude,
        )


@dataclass(frozen=True)
class EditConfig:
    strength: float = 1.0
    k_min: float = 0.3
    k_max: float = 0.6
    nu: float = 0.5
    release_steps: int = 3
    extractor: str = "mask"


# Desk-scale recipe used for the toy models. Adam replaces the plain-SGD default
# of TrainConfig because it reaches usable samples within the time budget.
TOY_STAGE1 = TrainConfig(learning_rate=1e-3, batch_size=64, steps=8000, seed=0, optimizer="adam")
TOY_STAGE2A = TrainConfig(learning_rate=1e-3, batch_size=64, steps=2000, seed=1, optimizer="adam")
TOY_STAGE2B = TrainConfig(learning_rate=1e-3, batch_size=4, steps=6000, seed=2, optimizer="adam")


@dataclass(frozen=True)
class RunConfig:
    schedule: ScheduleConfig = ScheduleConfig()
    model: ModelConfig = ModelConfig()
    data: DataConfig = DataConfig()
    stage1: TrainConfig = TOY_STAGE1
    stage2a: TrainConfig = TOY_STAGE2A
    stage2b: TrainConfig = TOY_STAGE2B
    sampler: SamplerConfig = SamplerConfig()
    edit: EditConfig = EditConfig()

    def to_dict(self) -> dict:
        d = {
            "schedule": asdict(self.schedule),
            "model": self.model.to_dict(),
            "data": asdict(self.data),
            "training": {"stage1": asdict(self.stage1), "stage2a": asdict(self.stage2a), "stage2b": asdict(self.stage2b)},
            "sampler": asdict(self.sampler),
            "edit": asdict(self.edit),
        }
        d["data"]["size_range"] = list(self.data.size_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        d = dict(d)
        unknown = set(d) - {"schedule", "model", "data", "training", "sampler", "edit"}
        if unknown:
            raise ValueError(f"unknown config sections {sorted(unknown)}")
        training = dict(d.get("training", {}))
        extra = set(training) - {"stage1", "stage2a", "stage2b"}
        if extra:
            raise ValueError(f"unknown training stages {sorted(extra)}")
        base = cls()
        return cls(
            schedule=_build(ScheduleConfig, d.get("schedule"), base.schedule),
            model=_build(ModelConfig, d.get("model"), base.model),
            data=_build(DataConfig, d.get("data"), base.data),
            stage1=_build(TrainConfig, training.get("stage1"), base.stage1),
            stage2a=_build(TrainConfig, training.get("stage2a"), base.stage2a),
            stage2b=_build(TrainConfig, training.get("stage2b"), base.stage2b),
            sampler=_build(SamplerConfig, d.get("sampler"), base.sampler),
            edit=_build(EditConfig, d.get("edit"), base.edit),
        )

    @classmethod
    def load(cls, path: Optional[Union[str, Path]] = None, overrides: Iterable[str] = ()) -> RunConfig:
        d = json.loads(Path(path).read_text()) if path else {}
        for item in overrides:
            apply_override(d, item)
        return cls.from_dict(d)


def _build(cls, values: Optional[dict], default):
    merged = asdict(default) if not isinstance(default, ModelConfig) else default.to_dict()
    if values:
        names = {f.name for f in fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise ValueError(f"unknown {cls.__name__} keys {sorted(unknown)}")
        merged.update(values)
    for k, v in merged.items():
        if isinstance(v, list):
            merged[k] = tuple(v)
    return cls(**merged)


def apply_override(d: dict, item: str) -> None:
    """Apply ``section.key=value`` (value parsed as JSON when possible) to a raw config dict."""
    if "=" not in item:
        raise ValueError(f"override {item!r} is not of the form key.path=value")
    path, raw = item.split("=", 1)
    try:
        value: Any = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = path.split(".")
    node = d
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = copy.deepcopy(value)
