"""End-to-end sprite model: dictionary + generator, frame encoder, offset
predictor, and background, with the differentiable soft forward pass used for
training and the hard decomposition path used at inference.

Hard reconstructions are rendered from 8-bit-quantized sprites and background
(the same values an exported package stores), so exporting and re-rendering a
decomposition reproduces them exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import compositor, geometry, selection, transform
from .compositor import BackgroundModel
from .config import ModelConfig
from .dictionary import SpriteDictionary
from .encoder import EncoderConfig, FrameEncoder


@dataclass
class SoftForward:
    """Everything the loss needs from one soft forward pass."""

    recon: torch.Tensor          # (B, 3, h, w)
    scores: torch.Tensor         # (B, layers, Gh, Gw, m)
    switches: torch.Tensor       # (B, layers, Gh, Gw)
    px: torch.Tensor             # (B, layers, Gh, Gw, k+1)
    py: torch.Tensor
    bg_offset_probs: torch.Tensor | None = None


@dataclass
class Decomposition:
    """Hard placements for one frame, sufficient to re-render it."""

    frame_index: int
    placements: list[selection.Placement]
    grid_hw: tuple[int, int]
    k: int


def quantize_unit(x: torch.Tensor) -> torch.Tensor:
    """Snap values in [0, 1] to the 8-bit grid (round(x*255)/255)."""
    return torch.round(x.detach().to(torch.float64) * 255.0).clamp(0, 255) / 255.0


class SpriteModel(nn.Module):
    def __init__(self, cfg: ModelConfig, frame_height: int, frame_width: int,
                 n_frames: int = 1, seed: int = 0):
        super().__init__()
        cfg.validate()
        cfg.check_frame_dims(frame_height, frame_width)
        self.cfg = cfg
        self.frame_height, self.frame_width = frame_height, frame_width
        self.grid_h, self.grid_w = cfg.grid_shape(frame_height, frame_width)
        torch.manual_seed(seed)
        self.dictionary = SpriteDictionary(cfg.m, cfg.d, cfg.k, cfg.groups)
        self.encoder = FrameEncoder(EncoderConfig(
            k=cfg.k, d=cfg.d, layers=cfg.layers, leaky_slope=cfg.leaky_slope,
            groups=cfg.groups, channel_base=cfg.channel_base, channel_cap=cfg.channel_cap))
        self.offset_predictor = transform.OffsetPredictor(
            cfg.k, cfg.d, cfg.groups, cfg.leaky_slope, cfg.channel_base, cfg.channel_cap)
        self.background = BackgroundModel(
            cfg.background, frame_height, frame_width, n_frames,
            cfg.bg_width_factor, cfg.bg_offset_stride)

        k = cfg.k
        rows = torch.arange(self.grid_h).repeat_interleave(self.grid_w)
        cols = torch.arange(self.grid_w).repeat(self.grid_h)
        self.register_buffer("stamp_tops", rows * (k // 2) + k // 4 - k)
        self.register_buffer("stamp_lefts", cols * (k // 2) + k // 4 - k)

    @property
    def n_anchors(self) -> int:
        return self.grid_h * self.grid_w

    def extract_crops(self, frames: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """k x k frame windows centered on each anchor, plus validity masks
        (0 on the zero-filled out-of-frame margin).

        Returns (B, A, 3, k, k) crops and (B, A, 1, k, k) masks.
        """
        B = frames.shape[0]
        k, half, margin = self.cfg.k, self.cfg.k // 2, self.cfg.k // 4
        ones = torch.ones(B, 1, *frames.shape[-2:], dtype=frames.dtype, device=frames.device)
        stacked = torch.cat([frames, ones], dim=1)
        padded = F.pad(stacked, (margin, margin, margin, margin))
        cols = F.unfold(padded, kernel_size=k, stride=half)
        cols = cols.view(B, 4, k, k, self.n_anchors).permute(0, 4, 1, 2, 3)
        return cols[:, :, :3], cols[:, :, 3:]

    def forward_soft(self, frames: torch.Tensor, frame_indices: torch.Tensor,
                     perm_rng: np.random.Generator,
                     switches_override: torch.Tensor | float | None = None) -> SoftForward:
        """Differentiable reconstruction of a batch: encode, score, mix soft
        sprites, soft-shift, paint each layer's stamps in a fresh random
        order, and composite over the background."""
        B = frames.shape[0]
        L, Gh, Gw, k = self.cfg.layers, self.grid_h, self.grid_w, self.cfg.k
        A = self.n_anchors

        grid = self.encoder(frames)
        switches = grid.switches
        if switches_override is not None:
            switches = torch.as_tensor(switches_override, dtype=frames.dtype,
                                       device=frames.device).expand_as(grid.switches)
        patches = self.dictionary.decode()
        scores = selection.score_anchors(grid.features, self.dictionary.normalized_latents())
        soft_sprites = selection.assemble_soft_sprite(scores, switches, patches)

        crops, crop_mask = self.extract_crops(frames)
        crops = crops.unsqueeze(1).expand(B, L, A, 3, k, k).reshape(-1, 3, k, k)
        crop_mask = crop_mask.unsqueeze(1).expand(B, L, A, 1, k, k).reshape(-1, 1, k, k)
        sprites_flat = soft_sprites.view(-1, 4, k, k)
        px, py = self.offset_predictor(crops, sprites_flat, crop_mask)

        stamps = transform.soft_shift(sprites_flat, px, py)
        stamps = compositor.premultiply(stamps).view(B * L, A, 4, 2 * k, 2 * k)

        perms = np.stack([perm_rng.permutation(A) for _ in range(B * L)])
        perms_t = torch.from_numpy(perms).to(frames.device)
        canvases = compositor.paint_stamps_premultiplied(
            stamps, self.stamp_tops, self.stamp_lefts, perms_t,
            self.frame_height, self.frame_width).view(B, L, 4, self.frame_height, self.frame_width)

        bg = self.background(frame_indices, soft=True)
        recon = compositor.composite_soft(bg, [canvases[:, l] for l in range(L)])
        return SoftForward(
            recon=recon, scores=scores, switches=switches,
            px=px.view(B, L, Gh, Gw, k + 1), py=py.view(B, L, Gh, Gw, k + 1),
            bg_offset_probs=self.background.offset_probs(frame_indices))

    # --- hard inference -----------------------------------------------------

    def quantized_patches(self) -> torch.Tensor:
        """(m, 4, k, k) float64 sprites on the 8-bit grid."""
        with torch.no_grad():
            return quantize_unit(self.dictionary.decode())

    def quantized_background(self, frame_index: int) -> torch.Tensor:
        """(3, h, w) float64 background canvas for hard rendering."""
        with torch.no_grad():
            if self.background.mode == "solid":
                color = quantize_unit(self.background.color)
                return color.view(3, 1, 1).expand(3, self.frame_height, self.frame_width).clone()
            tex = quantize_unit(self.background.texture())
            y, x = self.background.hard_offsets(frame_index)
            return tex[:, y : y + self.frame_height, x : x + self.frame_width].clone()

    @torch.no_grad()
    def decompose(self, frame: torch.Tensor, frame_index: int = 0) -> Decomposition:
        """Hard placements for one (3, h, w) frame: argmax sprite per anchor,
        thresholded switches, argmax offsets predicted from the hard sprite."""
        frames = frame.unsqueeze(0)
        grid = self.encoder(frames)
        scores = selection.score_anchors(grid.features, self.dictionary.normalized_latents())
        indices, active = selection.harden(scores, grid.switches)
        indices, active = indices[0], active[0]

        patches = self.dictionary.decode().to(frames.dtype)
        crops, crop_mask = self.extract_crops(frames)

        placements: list[selection.Placement] = []
        k = self.cfg.k
        for layer in range(self.cfg.layers):
            sel = active[layer].reshape(-1).nonzero(as_tuple=True)[0]
            if sel.numel() == 0:
                continue
            sprite_ids = indices[layer].reshape(-1)[sel]
            sprite_in = patches[sprite_ids]
            px, py = self.offset_predictor(crops[0, sel], sprite_in, crop_mask[0, sel])
            dxs = transform.hard_offsets(px, k)
            dys = transform.hard_offsets(py, k)
            for j, anchor in enumerate(sel.tolist()):
                row, col = divmod(anchor, self.grid_w)
                placements.append(selection.Placement(
                    layer=layer, row=row, col=col, sprite=int(sprite_ids[j]),
                    dy=int(dys[j]), dx=int(dxs[j]), active=True))
        return Decomposition(frame_index=frame_index, placements=placements,
                             grid_hw=(self.grid_h, self.grid_w), k=k)

    def render_decomposition(self, decomp: Decomposition) -> np.ndarray:
        """(3, h, w) float64 hard reconstruction from quantized assets;
        placements paint in list order within each layer, layer 0 backmost."""
        patches = self.quantized_patches()
        bg = self.quantized_background(decomp.frame_index)
        return render_placements(decomp.placements, patches, bg, self.cfg.k,
                                 self.cfg.layers, self.frame_height, self.frame_width)

    @torch.no_grad()
    def reconstruct_hard(self, frame: torch.Tensor, frame_index: int = 0
                         ) -> tuple[np.ndarray, Decomposition]:
        decomp = self.decompose(frame, frame_index)
        return self.render_decomposition(decomp), decomp


def render_placements(placements: list[selection.Placement], patches: torch.Tensor,
                      background: torch.Tensor, k: int, layers: int,
                      height: int, width: int) -> np.ndarray:
    """Deterministic hard render shared by the model and the package
    re-renderer: straight alpha-over of each layer's placements in list
    order, then back-to-front compositing over the opaque background."""
    canvases = []
    for layer in range(layers):
        placed = [p for p in placements if p.layer == layer and p.active]
        if not placed:
            canvases.append(torch.zeros(4, height, width, dtype=background.dtype))
            continue
        stamps = torch.stack([patches[p.sprite] for p in placed])
        positions = np.array([geometry.sprite_topleft(p.row, p.col, k, p.dy, p.dx)
                              for p in placed])
        canvases.append(compositor.render_layer(
            stamps.to(background.dtype), positions, range(len(placed)), height, width))
    rgb = compositor.composite_frame(background, canvases)
    return rgb.cpu().numpy()


def frames_to_tensor(frames, dtype=torch.float32) -> torch.Tensor:
    """List of dataset Frames -> (B, 3, h, w) tensor."""
    return torch.stack([torch.as_tensor(f.pixels, dtype=dtype) for f in frames])
