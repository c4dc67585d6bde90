"""Command-line entry points: train, reconstruct, export, segment, eval,
synth, and serve.

Configuration comes from an optional TOML/JSON file plus flag overrides
(flags > file > defaults); every source of randomness derives from --seed.
The checkpoint directory defaults to $SPRITEFACTOR_CACHE.
"""

from __future__ import annotations

import argparse
import http.server
import json
import os
import sys
from functools import partial
from pathlib import Path

import numpy as np
import torch

from . import evaluation, export, trainer
from .compositor import estimate_background_color
from .config import ConfigError, RunConfig, load_run_config
from .dataset import (Frame, default_sprite_bank, generate_floating_sprites,
                      load_frames, load_image, load_synthetic_dataset,
                      write_synthetic_dataset)
from .model import SpriteModel, frames_to_tensor
from .trainer import FrameListData, SingleImageCropData, load_checkpoint


def _dataset_overrides(args) -> dict:
    """Map --dataset to a DatasetSpec source/path pair."""
    overrides = {}
    if getattr(args, "dataset", None):
        target = args.dataset
        if target == "synthetic":
            overrides["dataset.source"] = "synthetic"
        elif Path(target).is_dir():
            overrides["dataset.source"] = "frame-directory"
            overrides["dataset.path"] = target
        elif Path(target).is_file():
            overrides["dataset.source"] = "single-image"
            overrides["dataset.path"] = target
        else:
            raise ConfigError(f"dataset path does not exist: {target}")
    if getattr(args, "crop", None):
        cw, ch = (int(v) for v in args.crop.lower().split("x"))
        overrides["dataset.crop"] = (cw, ch)
    return overrides


def build_run_config(args) -> RunConfig:
    overrides = _dataset_overrides(args)
    flag_map = {
        "k": "model.k", "m": "model.m", "d": "model.d", "layers": "model.layers",
        "background": "model.background", "channel_base": "model.channel_base",
        "channel_cap": "model.channel_cap",
        "steps": "train.max_steps", "batch": "train.batch", "lr": "train.lr",
        "seed": "train.seed", "prior_weight": "train.prior_weight",
        "checkpoint_every": "train.checkpoint_every", "log_every": "train.log_every",
        "frames": "dataset.synth_frames", "synth_sprites": "dataset.synth_sprites",
        "synth_size": "dataset.synth_sprite_size",
    }
    for flag, dotted in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[dotted] = value
    if getattr(args, "canvas", None):
        h, w = (int(v) for v in args.canvas.lower().split("x"))
        overrides["dataset.synth_canvas"] = (h, w)
    if getattr(args, "seed", None) is not None:
        overrides["dataset.seed"] = args.seed
    return load_run_config(getattr(args, "config", None), overrides)


def load_training_data(cfg: RunConfig):
    """Build the training data source; returns (data, frames) where `frames`
    is the full frame list when one exists (None for single-image crops)."""
    spec, model = cfg.dataset, cfg.model
    if spec.source == "synthetic":
        bank = default_sprite_bank(spec.synth_sprite_size)[: spec.synth_sprites]
        scenes = generate_floating_sprites(spec.synth_frames, bank,
                                           np.random.default_rng(spec.seed),
                                           canvas=spec.synth_canvas)
        frames = [s.frame for s in scenes]
        return FrameListData(frames), frames
    if spec.source == "single-image":
        arr = load_image(spec.path)
        frame = Frame(pixels=arr.astype(np.float32).transpose(2, 0, 1) / 255.0)
        cw, ch = spec.crop
        if cw > frame.width or ch > frame.height:
            raise ConfigError(f"crop {cw}x{ch} exceeds image {frame.width}x{frame.height}")
        model.check_frame_dims(ch, cw)
        return SingleImageCropData(frame, cw, ch), [frame]
    frames = load_frames(spec.path)
    if spec.crop is not None:
        raise ConfigError("crop is only supported with single-image datasets")
    model.check_frame_dims(frames[0].height, frames[0].width)
    return FrameListData(frames), frames


def default_out_dir(args) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get("SPRITEFACTOR_CACHE", "checkpoints"))


def cmd_train(args) -> int:
    cfg = build_run_config(args)
    data, frames = load_training_data(cfg)
    h, w = data.frame_hw
    gh, gw = cfg.model.grid_shape(h, w)
    print(f"frames: {data.n_frames if frames is None else len(frames)} at {w}x{h}, "
          f"anchor grid 2w/k x 2h/k = {gw}x{gh}, layers={cfg.model.layers}, "
          f"m={cfg.model.m}, d={cfg.model.d}, k={cfg.model.k}")
    out_dir = default_out_dir(args)

    resume_payload = None
    if args.resume:
        model, resume_payload = load_checkpoint(args.resume, cfg.model)
        print(f"resumed from {args.resume} at step {resume_payload['step']}")
    else:
        model = SpriteModel(cfg.model, h, w, n_frames=data.n_frames, seed=cfg.train.seed)
        if cfg.model.background == "solid" and frames is not None:
            color = estimate_background_color(frames, np.random.default_rng([cfg.train.seed, 23]))
            model.background.set_solid_color(color)
            print(f"solid background color: {np.round(color, 4).tolist()}")

    def log_fn(report):
        print(f"step {report.step}: total={report.total:.6f} l2={report.l2:.6f} "
              f"priors=({report.prior_switch:.4f},{report.prior_score:.4f},{report.prior_offset:.4f})")

    final = trainer.train(model, data, cfg.model, cfg.train, out_dir,
                          resume_payload=resume_payload, log_fn=log_fn)
    print(f"final checkpoint: {final}")
    return 0


def _load_model_and_frames(args) -> tuple[SpriteModel, list[Frame], RunConfig]:
    model, payload = load_checkpoint(args.checkpoint)
    cfg = RunConfig.from_dict({"model": payload["model_config"],
                               "train": payload["train_config"]})
    ds_overrides = _dataset_overrides(args)
    for key, value in ds_overrides.items():
        section, name = key.split(".")
        setattr(getattr(cfg, section), name, value)
    if cfg.dataset.source == "synthetic":
        cfg.dataset.seed = payload["train_config"]["seed"]
    _, frames = load_training_data(cfg)
    if frames is None:
        raise ConfigError("this command needs a frame dataset, not single-image crops")
    h, w = frames[0].height, frames[0].width
    if (h, w) != (model.frame_height, model.frame_width):
        raise ConfigError(
            f"checkpoint was trained on {model.frame_width}x{model.frame_height} frames "
            f"but the dataset has {w}x{h}")
    return model, frames, cfg


def cmd_reconstruct(args) -> int:
    from .dataset import save_frame

    model, frames, _ = _load_model_and_frames(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    limit = args.frames if args.frames else len(frames)
    psnrs = []
    for i, frame in enumerate(frames[:limit]):
        recon, _ = model.reconstruct_hard(torch.as_tensor(frame.pixels), frame.index)
        recon_q = np.round(recon * 255.0) / 255.0
        psnrs.append(evaluation.psnr(recon_q, frame.pixels.astype(np.float64)))
        save_frame(Frame(pixels=recon.astype(np.float32), index=i),
                   out_dir / f"recon_{i:05d}.png")
    summary = {"frames": len(psnrs), "psnr_mean": float(np.mean(psnrs)),
               "psnr_min": float(np.min(psnrs)), "psnr_max": float(np.max(psnrs))}
    (out_dir / "psnr_summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary))
    return 0


def cmd_export(args) -> int:
    model, frames, _ = _load_model_and_frames(args)
    limit = args.frames if args.frames else len(frames)
    manifest = export.export_decomposition(model, frames[:limit], Path(args.out))
    print(f"wrote {manifest}")
    return 0


def cmd_segment(args) -> int:
    from PIL import Image

    model, frames, _ = _load_model_and_frames(args)
    ids = [int(v) for v in args.sprites.split(",") if v != ""] if args.sprites else []
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    patches_alpha = model.quantized_patches().numpy()[:, 3]
    limit = args.frames if args.frames else len(frames)
    for i, frame in enumerate(frames[:limit]):
        decomp = model.decompose(torch.as_tensor(frame.pixels), frame.index)
        mask = evaluation.segment_by_sprites(decomp, patches_alpha, ids,
                                             model.frame_height, model.frame_width)
        Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(
            out_dir / f"mask_{i:05d}.png")
    print(f"wrote {limit} masks to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    model, payload = load_checkpoint(args.checkpoint)
    scenes, _ = load_synthetic_dataset(args.dataset)
    if args.frames:
        scenes = scenes[: args.frames]
    report = evaluation.evaluate_scenes(model, scenes, tau=args.tau)
    report.write_json(args.out)
    if args.csv:
        evaluation.write_per_frame_csv(report, args.csv)
    print(json.dumps({k: v for k, v in report.as_dict().items() if k != "per_frame"}))
    return 0


def cmd_synth(args) -> int:
    bank = default_sprite_bank(args.synth_size or 32)
    if args.synth_sprites:
        bank = bank[: args.synth_sprites]
    canvas = (128, 128)
    if args.canvas:
        h, w = (int(v) for v in args.canvas.lower().split("x"))
        canvas = (h, w)
    rng = np.random.default_rng(args.seed or 0)
    scenes = generate_floating_sprites(args.frames, bank, rng, canvas=canvas)
    truth = write_synthetic_dataset(scenes, bank, args.out)
    print(f"wrote {args.frames} frames and {truth}")
    return 0


class _PackageHandler(http.server.SimpleHTTPRequestHandler):
    def end_headers(self):
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Cache-Control", "no-store")
        super().end_headers()

    def log_message(self, fmt, *args):
        sys.stderr.write(f"serve: {fmt % args}\n")


def cmd_serve(args) -> int:
    handler = partial(_PackageHandler, directory=str(Path(args.package).resolve()))
    with http.server.ThreadingHTTPServer((args.bind, args.port), handler) as httpd:
        print(f"serving {args.package} at http://{args.bind}:{args.port}/ "
              "(Ctrl-C to stop)")
        try:
            httpd.serve_forever()
        except KeyboardInterrupt:
            pass
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spritefactor",
                                     description="Self-supervised sprite decomposition toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_model_flags(p):
        p.add_argument("--config", help="TOML or JSON config file")
        p.add_argument("--k", type=int, help="sprite size (power of two >= 4)")
        p.add_argument("--m", type=int, help="dictionary size")
        p.add_argument("--d", type=int, help="latent dimension")
        p.add_argument("--layers", type=int, help="number of depth layers")
        p.add_argument("--background", choices=["solid", "texture"])
        p.add_argument("--channel-base", dest="channel_base", type=int)
        p.add_argument("--channel-cap", dest="channel_cap", type=int)

    def add_dataset_flags(p):
        p.add_argument("--dataset", help="'synthetic', a frame directory, or a single image")
        p.add_argument("--crop", help="crop size WxH for single-image datasets")
        p.add_argument("--frames", type=int, help="synthetic frame count / frame limit")
        p.add_argument("--canvas", help="synthetic canvas HxW")
        p.add_argument("--synth-sprites", dest="synth_sprites", type=int,
                       help="how many bank sprites to use")
        p.add_argument("--synth-size", dest="synth_size", type=int,
                       help="synthetic sprite size in pixels")

    p = sub.add_parser("train", help="train a model")
    add_model_flags(p)
    add_dataset_flags(p)
    p.add_argument("--steps", type=int, help="max optimization steps")
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--prior-weight", dest="prior_weight", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--log-every", dest="log_every", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--out", help="checkpoint directory (default $SPRITEFACTOR_CACHE)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("reconstruct", help="write hard reconstructions and a PSNR summary")
    p.add_argument("--checkpoint", required=True)
    add_dataset_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("export", help="export a decomposition package")
    p.add_argument("--checkpoint", required=True)
    add_dataset_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("segment", help="segment frames by selected sprite ids")
    p.add_argument("--checkpoint", required=True)
    add_dataset_flags(p)
    p.add_argument("--sprites", default="", help="comma-separated sprite ids, e.g. 3,7,12")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_segment)

    p = sub.add_parser("eval", help="score a checkpoint against synthetic ground truth")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="synthetic dataset directory with truth.json")
    p.add_argument("--tau", type=float, default=0.5, help="IoU threshold for matching")
    p.add_argument("--frames", type=int, help="evaluate only the first N frames")
    p.add_argument("--out", required=True, help="metrics report JSON path")
    p.add_argument("--csv", help="optional per-frame CSV path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("synth", help="generate the floating-sprites dataset")
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--canvas", help="canvas HxW (default 128x128)")
    p.add_argument("--synth-sprites", dest="synth_sprites", type=int)
    p.add_argument("--synth-size", dest="synth_size", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("serve", help="serve a decomposition package over HTTP for the editor")
    p.add_argument("--package", required=True)
    p.add_argument("--port", type=int, default=8615)
    p.add_argument("--bind", default="127.0.0.1")
    p.set_defaults(fn=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
