"""Joint optimization of dictionary, generator, encoder, offset predictor,
and background.

Loss = mean-squared reconstruction error plus a Beta(0.5, 0.5) log-likelihood
prior (weight 1e-4) on switch probabilities, score rows, and offset
distributions, optimized with AdamW (decoupled weight decay on network
weights only; the background trains on its own learning rate).

All stochasticity (batch order, crop positions, overlap permutations) derives
from the run seed and the step index alone, so runs are reproducible and
resuming from a checkpoint is bit-compatible with an uninterrupted run.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import ConfigError, ModelConfig, TrainConfig
from .dataset import Frame, sample_crop
from .model import SoftForward, SpriteModel, frames_to_tensor

CLAMP_EPS = 1e-6
CHECKPOINT_FORMAT = "spritefactor-checkpoint"
CHECKPOINT_VERSION = 1


def reconstruction_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all pixels and channels."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return F.mse_loss(pred, target)


def beta_prior_loss(x: torch.Tensor) -> torch.Tensor:
    """Beta(0.5, 0.5) negative log-likelihood up to an additive constant:
    mean of 0.5*log(x~(1-x~)) with x~ clamped to [eps, 1-eps]. Minimized at
    the endpoints, maximal at 0.5, symmetric about 0.5."""
    xc = x.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
    return (0.5 * torch.log(xc * (1.0 - xc))).mean()


@dataclass
class LossReport:
    step: int
    total: float
    l2: float
    prior_switch: float
    prior_score: float
    prior_offset: float

    def priors_sum(self) -> float:
        return self.prior_switch + self.prior_score + self.prior_offset

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def compute_loss(out: SoftForward, target: torch.Tensor, prior_weight: float,
                 step: int = 0) -> tuple[torch.Tensor, LossReport]:
    l2 = reconstruction_loss(out.recon, target)
    p_switch = beta_prior_loss(out.switches)
    p_score = beta_prior_loss(out.scores)
    offset_entries = [out.px.reshape(-1), out.py.reshape(-1)]
    if out.bg_offset_probs is not None:
        offset_entries.append(out.bg_offset_probs.reshape(-1))
    p_offset = beta_prior_loss(torch.cat(offset_entries))
    total = l2 + prior_weight * (p_switch + p_score + p_offset)
    report = LossReport(step=step, total=total.item(), l2=l2.item(),
                        prior_switch=p_switch.item(), prior_score=p_score.item(),
                        prior_offset=p_offset.item())
    return total, report


def _check_finite(report: LossReport) -> None:
    for name in ("l2", "prior_switch", "prior_score", "prior_offset"):
        if not math.isfinite(getattr(report, name)):
            raise FloatingPointError(
                f"loss term {name!r} diverged at step {report.step}: {getattr(report, name)}")
    if not math.isfinite(report.total):
        raise FloatingPointError(f"total loss diverged at step {report.step}")


def build_optimizer(model: SpriteModel, cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW with decoupled weight decay on network weights only: dictionary
    latents and all background parameters are decay-free, and the background
    uses its own learning rate."""
    bg_params = list(model.background.parameters())
    latents = [model.dictionary.latents]
    skip = {id(p) for p in bg_params} | {id(p) for p in latents}
    net_params = [p for p in model.parameters() if id(p) not in skip]
    groups = [
        {"params": net_params, "lr": cfg.lr, "weight_decay": cfg.weight_decay},
        {"params": latents, "lr": cfg.lr, "weight_decay": 0.0},
    ]
    if bg_params:
        groups.append({"params": bg_params, "lr": cfg.background_lr, "weight_decay": 0.0})
    return torch.optim.AdamW(groups)


# --- training data sources ---------------------------------------------------

class FrameListData:
    """Fixed frame list; batches follow a per-epoch shuffled order derived
    from the seed, so any step's batch is a pure function of (seed, step)."""

    def __init__(self, frames: list[Frame]):
        if not frames:
            raise ValueError("dataset is empty")
        self.frames = frames
        h, w = frames[0].height, frames[0].width
        for f in frames:
            if (f.height, f.width) != (h, w):
                raise ValueError(f"frame {f.index} has mismatched dims")
        self.frame_hw = (h, w)
        self.n_frames = len(frames)

    def batch(self, seed: int, step: int, batch_size: int) -> tuple[torch.Tensor, torch.Tensor]:
        n = len(self.frames)
        if n < batch_size:
            idx = np.random.default_rng([seed, 11, step]).integers(0, n, batch_size)
        else:
            per_epoch = n // batch_size
            epoch, pos = divmod(step, per_epoch)
            perm = np.random.default_rng([seed, 13, epoch]).permutation(n)
            idx = perm[pos * batch_size : (pos + 1) * batch_size]
        frames = frames_to_tensor([self.frames[i] for i in idx])
        return frames, torch.as_tensor(idx, dtype=torch.long)


class SingleImageCropData:
    """Random crops of one image; every crop reports frame index 0."""

    def __init__(self, frame: Frame, crop_w: int, crop_h: int):
        self.frame = frame
        self.crop_w, self.crop_h = crop_w, crop_h
        self.frame_hw = (crop_h, crop_w)
        self.n_frames = 1

    def batch(self, seed: int, step: int, batch_size: int) -> tuple[torch.Tensor, torch.Tensor]:
        rng = np.random.default_rng([seed, 17, step])
        crops = [sample_crop(self.frame, self.crop_w, self.crop_h, rng)
                 for _ in range(batch_size)]
        return frames_to_tensor(crops), torch.zeros(batch_size, dtype=torch.long)


# --- step and loop -----------------------------------------------------------

def train_step(model: SpriteModel, frames: torch.Tensor, frame_indices: torch.Tensor,
               optimizer: torch.optim.Optimizer, cfg: TrainConfig, step: int) -> LossReport:
    """One forward/backward/update transaction over the shared parameters."""
    perm_rng = np.random.default_rng([cfg.seed, 19, step])
    out = model.forward_soft(frames, frame_indices, perm_rng)
    total, report = compute_loss(out, frames, cfg.prior_weight, step)
    _check_finite(report)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return report


def save_checkpoint(path: str | Path, model: SpriteModel, optimizer, step: int,
                    model_cfg: ModelConfig, train_cfg: TrainConfig) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "step": step,
        "model_config": dataclasses.asdict(model_cfg),
        "train_config": dataclasses.asdict(train_cfg),
        "frame_meta": {"height": model.frame_height, "width": model.frame_width,
                       "n_frames": model.background.offset_logits.shape[0]
                       if model.background.mode == "texture" else 1},
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path, expect_model_cfg: ModelConfig | None = None
                    ) -> tuple[SpriteModel, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a spritefactor checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = ModelConfig(**payload["model_config"])
    if expect_model_cfg is not None and dataclasses.asdict(expect_model_cfg) != dataclasses.asdict(cfg):
        raise ConfigError(
            f"checkpoint model config {payload['model_config']} does not match "
            f"requested config {dataclasses.asdict(expect_model_cfg)}")
    meta = payload["frame_meta"]
    model = SpriteModel(cfg, meta["height"], meta["width"], meta["n_frames"])
    model.load_state_dict(payload["model_state"])
    return model, payload


def train(model: SpriteModel, data, model_cfg: ModelConfig, train_cfg: TrainConfig,
          out_dir: str | Path, resume_payload: dict | None = None,
          log_fn=None) -> Path:
    """Run train_step to max_steps with periodic checkpoints and a JSONL loss
    log; returns the final checkpoint path. Pass a loaded checkpoint payload
    to resume (the continuation is bit-identical to an uninterrupted run)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    optimizer = build_optimizer(model, train_cfg)
    start_step = 0
    if resume_payload is not None:
        optimizer.load_state_dict(resume_payload["optimizer_state"])
        start_step = resume_payload["step"]
    log_path = out_dir / "train_log.jsonl"

    with log_path.open("a") as log:
        for step in range(start_step, train_cfg.max_steps):
            frames, frame_indices = data.batch(train_cfg.seed, step, train_cfg.batch)
            report = train_step(model, frames, frame_indices, optimizer, train_cfg, step)
            if step % train_cfg.log_every == 0 or step == train_cfg.max_steps - 1:
                mse = report.l2
                psnr = 99.0 if mse <= 0 else min(10.0 * math.log10(1.0 / mse), 99.0)
                entry = report.as_dict()
                entry["psnr_sample"] = psnr
                log.write(json.dumps(entry) + "\n")
                log.flush()
                if log_fn:
                    log_fn(report)
            if (step + 1) % train_cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"ckpt_{step + 1:06d}.pt", model, optimizer,
                                step + 1, model_cfg, train_cfg)
    final = out_dir / "ckpt_final.pt"
    save_checkpoint(final, model, optimizer, train_cfg.max_steps, model_cfg, train_cfg)
    return final
