"""Layered alpha compositing.

Conventions: RGBA is stored straight (non-premultiplied) with channels first;
the soft training path accumulates premultiplied values internally so that no
division by near-zero alpha appears in the gradient graph. Layer 1 is the
backmost; within a layer, stamps painted later go on top.
"""

from __future__ import annotations

import warnings

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


def alpha_over(fg: torch.Tensor, bg: torch.Tensor) -> torch.Tensor:
    """Porter-Duff over for straight RGBA arrays of shape (4, ...).

    out_a = fa + ba*(1-fa); out_rgb = (fa*f_rgb + ba*b_rgb*(1-fa)) / out_a,
    defined as 0 where out_a = 0.
    """
    fa, ba = fg[3:4], bg[3:4]
    out_a = fa + ba * (1.0 - fa)
    num = fa * fg[:3] + ba * bg[:3] * (1.0 - fa)
    safe = torch.where(out_a > 0, out_a, torch.ones_like(out_a))
    out_rgb = torch.where(out_a > 0, num / safe, torch.zeros_like(num))
    return torch.cat([out_rgb, out_a], dim=0)


def premultiply(rgba: torch.Tensor) -> torch.Tensor:
    """(..., 4, h, w) straight -> premultiplied."""
    return torch.cat([rgba[..., :3, :, :] * rgba[..., 3:4, :, :],
                      rgba[..., 3:4, :, :]], dim=-3)


def unpremultiply(rgba_p: torch.Tensor) -> torch.Tensor:
    """(..., 4, h, w) premultiplied -> straight, rgb = 0 where alpha = 0."""
    a = rgba_p[..., 3:4, :, :]
    safe = torch.where(a > 0, a, torch.ones_like(a))
    rgb = torch.where(a > 0, rgba_p[..., :3, :, :] / safe,
                      torch.zeros_like(rgba_p[..., :3, :, :]))
    return torch.cat([rgb, a], dim=-3)


def over_premultiplied(fg_p: torch.Tensor, bg_p: torch.Tensor) -> torch.Tensor:
    """Associative over on premultiplied RGBA (channel axis -3)."""
    fa = fg_p[..., 3:4, :, :]
    return fg_p + bg_p * (1.0 - fa)


def render_layer(stamps: torch.Tensor, positions: torch.Tensor | np.ndarray,
                 order, height: int, width: int) -> torch.Tensor:
    """Composite stamps onto a transparent canvas in the given paint order.

    stamps: (N, 4, sh, sw) straight RGBA; positions: (N, 2) integer top-left
    (y, x), possibly outside the canvas (clipped silently); order: indices in
    paint sequence, order[0] painted first (bottom). Returns (4, height,
    width) straight RGBA.
    """
    positions = np.asarray(positions)
    canvas = torch.zeros(4, height, width, dtype=stamps.dtype, device=stamps.device)
    sh, sw = stamps.shape[-2:]
    for i in order:
        y0, x0 = int(positions[i, 0]), int(positions[i, 1])
        ty0, tx0 = max(y0, 0), max(x0, 0)
        ty1, tx1 = min(y0 + sh, height), min(x0 + sw, width)
        if ty0 >= ty1 or tx0 >= tx1:
            continue
        stamp = stamps[i][:, ty0 - y0 : ty1 - y0, tx0 - x0 : tx1 - x0]
        canvas[:, ty0:ty1, tx0:tx1] = alpha_over(stamp, canvas[:, ty0:ty1, tx0:tx1])
    return canvas


def composite_frame(background: torch.Tensor, layers: list[torch.Tensor]) -> torch.Tensor:
    """Back-to-front composite of straight-RGBA layer canvases over an opaque
    RGB background (3, h, w). layers[0] is the backmost. Returns RGB."""
    out = torch.cat([background, torch.ones_like(background[:1])], dim=0)
    for layer in layers:
        out = alpha_over(layer, out)
    return out[:3]


def paint_stamps_premultiplied(stamps: torch.Tensor, tops: torch.Tensor,
                               lefts: torch.Tensor, perms: torch.Tensor,
                               height: int, width: int) -> torch.Tensor:
    """Batched differentiable painting used by the soft training path.

    stamps: (B, A, 4, s, s) premultiplied RGBA stamps; tops/lefts: (A,)
    top-left of each stamp in frame coordinates (may be negative); perms:
    (B, A) paint order per batch element (perms[b, 0] is painted first).
    Returns premultiplied (B, 4, height, width) canvases.
    """
    B, A, _, s, _ = stamps.shape
    pad = s  # stamps stay inside a canvas padded by their own size
    canvas = torch.zeros(B, height + 2 * pad, width + 2 * pad, 4,
                         dtype=stamps.dtype, device=stamps.device)
    stamps_cl = stamps.permute(0, 1, 3, 4, 2)  # channels last
    bidx = torch.arange(B, device=stamps.device)
    ar = torch.arange(s, device=stamps.device)
    tops_p = tops.to(torch.long) + pad
    lefts_p = lefts.to(torch.long) + pad
    bgrid = bidx[:, None, None]
    for t in range(A):
        sel = perms[:, t]
        rows = (tops_p[sel])[:, None, None] + ar[None, :, None]
        cols = (lefts_p[sel])[:, None, None] + ar[None, None, :]
        region = canvas[bgrid, rows, cols]            # (B, s, s, 4)
        stamp = stamps_cl[bidx, sel]
        new = stamp + region * (1.0 - stamp[..., 3:4])
        canvas = canvas.index_put((bgrid, rows, cols), new)
    out = canvas[:, pad : pad + height, pad : pad + width, :]
    return out.permute(0, 3, 1, 2)


def paint_stamps_ranked(stamps: torch.Tensor, ranks: torch.Tensor,
                        grid_h: int, grid_w: int, k: int,
                        height: int, width: int) -> torch.Tensor:
    """Closed-form equivalent of paint_stamps_premultiplied for stamps laid
    out on the anchor grid (one 2k stamp per cell at stride k/2).

    Every pixel is covered by at most 16 stamps, so instead of painting
    sequentially we gather each half-cell's 16 covering stamp blocks, sort
    them by paint rank (higher rank on top), and accumulate front to back
    with an exclusive cumulative product of (1 - alpha). Same result as the
    sequential painter, in a handful of batched ops.

    stamps: (N, grid_h*grid_w, 4, 2k, 2k) premultiplied; ranks: (N, A) paint
    rank per anchor (higher = later = on top). Returns (N, 4, height, width).
    """
    N, A = stamps.shape[:2]
    half, quarter = k // 2, k // 4
    # Stamps start at anchor_row*half + quarter - k, i.e. exactly at virtual
    # cell (row-1) of a half-spaced grid shifted up-left by a quarter patch;
    # each stamp spans 4 virtual cells per axis.
    blocks = stamps.view(N, grid_h, grid_w, 4, 4, half, 4, half)
    blocks = blocks.permute(0, 4, 6, 3, 5, 7, 1, 2)  # (N, br, bc, C, half, half, Gh, Gw)
    padded = F.pad(blocks, (2, 2, 2, 2))
    rank_grid = F.pad(ranks.view(N, grid_h, grid_w).to(stamps.dtype), (2, 2, 2, 2),
                      value=-1.0)
    vh, vw = grid_h + 1, grid_w + 1
    slot_vals = []
    slot_ranks = []
    for br in range(4):
        for bc in range(4):
            slot_vals.append(padded[:, br, bc, :, :, :,
                                    3 - br : 3 - br + vh, 3 - bc : 3 - bc + vw])
            slot_ranks.append(rank_grid[:, 3 - br : 3 - br + vh, 3 - bc : 3 - bc + vw])
    vals = torch.stack(slot_vals, dim=1)      # (N, 16, C, half, half, vh, vw)
    rank_key = torch.stack(slot_ranks, dim=1)  # (N, 16, vh, vw)
    order = torch.argsort(rank_key, dim=1, descending=True, stable=True)
    idx = order[:, :, None, None, None, :, :].expand_as(vals)
    vals = torch.gather(vals, 1, idx)
    alpha = vals[:, :, 3]
    trans = torch.cumprod(1.0 - alpha, dim=1)
    exclusive = torch.cat([torch.ones_like(trans[:, :1]), trans[:, :-1]], dim=1)
    cells = (vals * exclusive.unsqueeze(2)).sum(dim=1)  # (N, C, half, half, vh, vw)
    canvas = cells.permute(0, 1, 4, 2, 5, 3).reshape(N, 4, vh * half, vw * half)
    return canvas[:, :, quarter : quarter + height, quarter : quarter + width]


def composite_soft(bg_rgb: torch.Tensor, layer_canvases_p: list[torch.Tensor]) -> torch.Tensor:
    """Differentiable final composite: premultiplied layer canvases over an
    opaque (B, 3, h, w) background; the result has alpha 1 so no division is
    needed. Returns (B, 3, h, w) RGB."""
    rgb = bg_rgb
    for layer_p in layer_canvases_p:
        fa = layer_p[:, 3:4]
        rgb = layer_p[:, :3] + rgb * (1.0 - fa)
    return rgb


def estimate_background_color(frames, rng: np.random.Generator) -> np.ndarray:
    """Dominant color: k-means (k=5) over the RGB pixels of 100 randomly
    sampled frames (all frames if fewer); returns the center of the most
    populous cluster as a float64 RGB triple."""
    from sklearn.cluster import KMeans
    from sklearn.exceptions import ConvergenceWarning

    frames = list(frames)
    if not frames:
        raise ValueError("need at least one frame")
    n_sample = min(100, len(frames))
    chosen = rng.choice(len(frames), size=n_sample, replace=False)
    pixels = np.concatenate(
        [np.asarray(frames[i].pixels, dtype=np.float64).reshape(3, -1).T for i in chosen])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        km = KMeans(n_clusters=5, n_init=1, random_state=int(rng.integers(2**31 - 1)))
        labels = km.fit_predict(pixels)
    counts = np.bincount(labels, minlength=5)
    return np.clip(km.cluster_centers_[int(np.argmax(counts))], 0.0, 1.0)


class BackgroundModel(nn.Module):
    """Frame background: a fixed solid color estimated before training, or a
    trainable texture at least as large as a frame, cropped at a per-frame
    discrete offset (trainable logits over crop positions at a fixed stride).
    """

    def __init__(self, mode: str, height: int, width: int, n_frames: int = 1,
                 width_factor: int = 2, offset_stride: int = 4):
        super().__init__()
        if mode not in ("solid", "texture"):
            raise ValueError(f"unknown background mode {mode!r}")
        self.mode = mode
        self.height, self.width = height, width
        if mode == "solid":
            self.register_buffer("color", torch.full((3,), 0.5))
        else:
            tex_w = max(width_factor * width, width)
            self.tex_h, self.tex_w = height, tex_w
            self.raw_texture = nn.Parameter(torch.zeros(3, self.tex_h, self.tex_w))
            xs = range(0, self.tex_w - width + 1, offset_stride)
            ys = range(0, self.tex_h - height + 1, offset_stride)
            self.offsets = [(y, x) for y in ys for x in xs]
            self.offset_logits = nn.Parameter(torch.zeros(n_frames, len(self.offsets)))

    def set_solid_color(self, rgb: np.ndarray) -> None:
        self.color.copy_(torch.as_tensor(rgb, dtype=self.color.dtype))

    def texture(self) -> torch.Tensor:
        return torch.sigmoid(self.raw_texture)

    def _crops(self) -> torch.Tensor:
        tex = self.texture()
        crops = [tex[:, y : y + self.height, x : x + self.width] for y, x in self.offsets]
        return torch.stack(crops)  # (n_offsets, 3, h, w)

    def forward(self, frame_indices: torch.Tensor, soft: bool = True) -> torch.Tensor:
        """(B, 3, h, w) background canvases for the given frame indices."""
        B = frame_indices.shape[0]
        if self.mode == "solid":
            return self.color.view(1, 3, 1, 1).expand(B, 3, self.height, self.width)
        logits = self.offset_logits[frame_indices]
        crops = self._crops()
        if soft:
            probs = F.softmax(logits, dim=-1)
            return torch.einsum("bo,ochw->bchw", probs, crops)
        return crops[torch.argmax(logits, dim=-1)]

    def offset_probs(self, frame_indices: torch.Tensor) -> torch.Tensor | None:
        if self.mode == "solid":
            return None
        return F.softmax(self.offset_logits[frame_indices], dim=-1)

    def hard_offsets(self, frame_index: int) -> tuple[int, int]:
        if self.mode == "solid":
            return (0, 0)
        return self.offsets[int(torch.argmax(self.offset_logits[frame_index]))]


def render_background(bg: BackgroundModel, frame_index: int, soft: bool = False) -> torch.Tensor:
    """Background canvas (3, h, w) for one frame: expected crop under the
    offset distribution during training, argmax crop at test time."""
    idx = torch.tensor([frame_index])
    return bg(idx, soft=soft)[0]
