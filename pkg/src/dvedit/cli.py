"""Command-line entry point: ``dvedit <command> [options]``.

Every command accepts ``--config FILE`` (JSON, see :mod:`dvedit.config`) and any
number of ``--set section.key=value`` overrides, and writes a JSON manifest
with the seeds, module hashes and resolved config of the run.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .codec import decode_latent, encode_latent
from .config import RunConfig
from .denoiser import ModelBundle
from .editing import MagicMixSpec, OutpaintSpec, invert_video, local_edit, magicmix, outpaint, sample_video, stylize
from .io import load_dataset, load_frames, load_masks, sample_clip, save_dataset, save_frames, write_json
from .metrics import KnownRegion, compute_metrics
from .recipe import toy_dataset, train_bundle
from .structure import EXTRACTORS, extract_structure
from .text import TextCondition

logger = logging.getLogger("dvedit")


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"sampler.seed={args.seed}")
    if getattr(args, "steps", None) is not None:
        overrides.append(f"sampler.steps={args.steps}")
    if getattr(args, "guidance", None) is not None:
        overrides.append(f"sampler.guidance_scale={args.guidance}")
    return RunConfig.load(args.config, overrides)


def _manifest(command: str, cfg: RunConfig, bundle: Optional[ModelBundle] = None, **extra) -> dict:
    out = {"command": command, "version": __version__, "config": cfg.to_dict()}
    if bundle is not None:
        out["module_hashes"] = bundle.hashes()
    out.update(extra)
    return out


def _write_video(out: Path, frames: torch.Tensor, manifest: dict) -> None:
    save_frames(frames, out / "frames")
    write_json(manifest, out / "manifest.json")
    logger.info("wrote %d frames to %s", frames.shape[0], out / "frames")


def cmd_gen_data(args) -> None:
    cfg = _config(args)
    clips = toy_dataset(cfg)
    save_dataset(clips, args.out)
    write_json(_manifest("gen-data", cfg, specs=clips.spec_dicts()), Path(args.out) / "manifest.json")
    logger.info("wrote %d clips to %s", len(clips), args.out)


def cmd_train(args) -> None:
    cfg = _config(args)
    clips = load_dataset(args.data)
    stage = {"stage1": "I", "stage2a": "II-A", "stage2b": "II-B"}[args.stage]
    base = None
    if stage != "I":
        if not args.checkpoint:
            raise SystemExit(f"train {args.stage} needs --checkpoint with trained content weights")
        base = load_checkpoint(args.checkpoint)
    trained = train_bundle(clips, cfg, content=base.content if base else None, stages=(stage,))
    if base is not None:
        # keep parts trained earlier unless this stage replaced them
        trained = ModelBundle(
            base.content,
            trained.structure or base.structure,
            trained.motion or base.motion,
            trained.frozen,
            base.reports + trained.reports,
        )
    save_checkpoint(trained, args.out)
    write_json(_manifest(f"train {args.stage}", cfg, trained, data=str(args.data)), Path(str(args.out) + ".manifest.json"))
    logger.info("saved checkpoint %s", args.out)


def _structure(args) -> Optional[torch.Tensor]:
    if getattr(args, "structure", None):
        return load_masks(args.structure)
    return None


def _source_frames(args, cfg: RunConfig, bundle: ModelBundle) -> torch.Tensor:
    """Load a frame directory; longer sequences are cut to one clip at the configured interval."""
    frames = load_frames(args.frames)
    if frames.shape[0] > bundle.config.num_frames:
        frames = sample_clip(frames, bundle.config.num_frames, cfg.data.frame_interval)
    return frames


def cmd_sample(args) -> None:
    cfg = _config(args)
    bundle = load_checkpoint(args.checkpoint)
    c = TextCondition.from_prompt(args.prompt)
    s = _structure(args)
    if args.no_motion:
        bundle = ModelBundle(bundle.content, bundle.structure, None, bundle.frozen, bundle.reports)
    latents = sample_video(bundle, c, s, cfg.sampler, cfg.schedule.build(), latent_size=(args.height // 8, args.width // 8))
    manifest = _manifest("sample", cfg, bundle, prompt=str(c), seed=cfg.sampler.seed, structure=str(args.structure) if args.structure else None)
    _write_video(Path(args.out), decode_latent(latents), manifest)


def cmd_invert(args) -> None:
    cfg = _config(args)
    bundle = load_checkpoint(args.checkpoint)
    frames = _source_frames(args, cfg, bundle)
    c = TextCondition.from_prompt(args.prompt)
    traj = invert_video(bundle, encode_latent(frames), c, cfg.sampler, cfg.schedule.build(), _structure(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.savez(out / "trajectory.npz", timesteps=np.asarray(traj.timesteps), latents=torch.stack(traj.latents).numpy())
    write_json(_manifest("invert", cfg, bundle, prompt=str(c), timesteps=traj.timesteps), out / "manifest.json")
    logger.info("wrote %d-step trajectory to %s", len(traj) - 1, out)


def cmd_edit(args) -> None:
    cfg = _config(args)
    sched = cfg.schedule.build()
    bundle = load_checkpoint(args.checkpoint)
    frames = _source_frames(args, cfg, bundle)
    c_tgt = TextCondition.from_prompt(args.prompt)
    if args.kind == "stylize":
        style = load_checkpoint(args.style_checkpoint).content
        extractor = EXTRACTORS[args.extractor or cfg.edit.extractor]
        result = stylize(frames, extractor, bundle, style, c_tgt, cfg.sampler, sched)
    elif args.kind == "local":
        c_src = TextCondition.from_prompt(args.source_prompt)
        s = extract_structure(frames, args.extractor) if args.extractor else None
        result = local_edit(bundle, frames, c_src, c_tgt, cfg.sampler, sched, s, strength=cfg.edit.strength)
    elif args.kind == "magicmix":
        spec = MagicMixSpec(TextCondition.from_prompt(args.source_prompt), c_tgt, cfg.edit.k_min, cfg.edit.k_max, cfg.edit.nu)
        result = magicmix(bundle, frames, spec, cfg.sampler, sched)
    else:
        spec = OutpaintSpec(
            tuple(frames.shape[-2:]), tuple(args.target), tuple(args.offset), c_tgt, cfg.edit.release_steps
        )
        result = outpaint(bundle, frames, spec, cfg.sampler, sched)
    manifest = _manifest(f"edit {args.kind}", cfg, bundle, seed=cfg.sampler.seed, pipeline=result.manifest)
    _write_video(Path(args.out), result.frames, manifest)


def cmd_metrics(args) -> None:
    frames = load_frames(args.frames)
    masks = load_masks(args.structure)
    region = KnownRegion(*args.known_region) if args.known_region else None
    report = compute_metrics(frames, masks, region).to_dict()
    report["frames"] = str(args.frames)
    report["structure"] = str(args.structure)
    if args.out:
        write_json(report, args.out)
    print(f"iou {report['iou']:.4f} flicker {report['flicker']:.5f}" + (
        f" seam {report['seam_gradient']:.5f}" if region else ""
    ))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. training.stage1.steps=100")
    common.add_argument("-v", "--verbose", action="store_true")

    sampling = argparse.ArgumentParser(add_help=False)
    sampling.add_argument("--seed", type=int)
    sampling.add_argument("--steps", type=int)
    sampling.add_argument("--guidance", type=float)

    p = argparse.ArgumentParser(prog="dvedit", description="Toy structure-conditioned video diffusion and editing.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="render a synthetic moving-shapes dataset")
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="run one training stage")
    t.add_argument("stage", choices=("stage1", "stage2a", "stage2b"))
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--checkpoint", type=Path, help="input checkpoint (stage2a/stage2b)")
    t.add_argument("--out", type=Path, required=True)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", parents=[common, sampling], help="sample a clip")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--structure", type=Path, help="directory of per-frame mask PNGs")
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--no-motion", action="store_true", help="sample frames independently")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_sample)

    i = sub.add_parser("invert", parents=[common, sampling], help="DDIM-invert a clip")
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--frames", type=Path, required=True)
    i.add_argument("--prompt", required=True)
    i.add_argument("--structure", type=Path)
    i.add_argument("--out", type=Path, required=True)
    i.set_defaults(func=cmd_invert)

    e = sub.add_parser("edit", parents=[common, sampling], help="edit a clip")
    e.add_argument("kind", choices=("stylize", "local", "magicmix", "outpaint"))
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--frames", type=Path, required=True)
    e.add_argument("--prompt", required=True, help="target prompt")
    e.add_argument("--source-prompt", help="source prompt (local, magicmix)")
    e.add_argument("--style-checkpoint", type=Path, help="content weights to swap in (stylize)")
    e.add_argument("--extractor", choices=sorted(EXTRACTORS), help="structure extractor")
    e.add_argument("--target", type=int, nargs=2, metavar=("H", "W"), help="outpaint canvas size")
    e.add_argument("--offset", type=int, nargs=2, metavar=("TOP", "LEFT"), default=(0, 0))
    e.add_argument("--out", type=Path, required=True)
    e.set_defaults(func=cmd_edit)

    m = sub.add_parser("metrics", help="structure IoU, flicker and seam statistics for a clip")
    m.add_argument("--frames", type=Path, required=True)
    m.add_argument("--structure", type=Path, required=True)
    m.add_argument("--known-region", type=int, nargs=4, metavar=("TOP", "LEFT", "H", "W"))
    m.add_argument("--out", type=Path)
    m.add_argument("-v", "--verbose", action="store_true")
    m.set_defaults(func=cmd_metrics)
    return p


def _validate(args, parser: argparse.ArgumentParser) -> None:
    if args.command != "edit":
        return
    if args.kind in ("local", "magicmix") and not args.source_prompt:
        parser.error(f"edit {args.kind} needs --source-prompt")
    if args.kind == "stylize" and not args.style_checkpoint:
        parser.error("edit stylize needs --style-checkpoint")
    if args.kind == "outpaint" and not args.target:
        parser.error("edit outpaint needs --target H W")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _validate(args, parser)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
