"""Local sprite transformations: discrete per-axis translations in
{-k/2, ..., +k/2} predicted as two categorical distributions, applied as a
differentiable expected shift onto a 2k x 2k stamp."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .layers import EncoderTrunk, VectorMLPHead

_basis_cache: dict[tuple, torch.Tensor] = {}


def shift_basis(k: int, dtype: torch.dtype, device: torch.device) -> torch.Tensor:
    """(k+1, k, 2k) one-hot translation operators: entry [s, i, i+s] places
    source index i at target index i+s, realizing offsets s - k/2 on a 2k-wide
    canvas whose center k columns hold the unshifted sprite."""
    key = (k, dtype, str(device))
    basis = _basis_cache.get(key)
    if basis is None:
        basis = torch.zeros(k + 1, k, 2 * k, dtype=dtype, device=device)
        idx = torch.arange(k)
        for s in range(k + 1):
            basis[s, idx, idx + s] = 1.0
        _basis_cache[key] = basis
    return basis


def offset_values(k: int) -> np.ndarray:
    """Integer offsets corresponding to the k+1 categorical bins."""
    return np.arange(k + 1) - k // 2


def soft_shift(sprite: torch.Tensor, px: torch.Tensor, py: torch.Tensor) -> torch.Tensor:
    """Expected translation of `sprite` under the product categorical (px, py).

    sprite: (..., 4, k, k); px, py: (..., k+1) probabilities over x/y shifts.
    Returns the (..., 4, 2k, 2k) stamp centered on the anchor, computed
    separably: shift-and-sum along x, then along y. Linear in the sprite and
    in each distribution, so mass is conserved exactly.
    """
    k = sprite.shape[-1]
    if px.shape[-1] != k + 1 or py.shape[-1] != k + 1:
        raise ValueError(f"offset distributions must have k+1={k + 1} bins")
    basis = shift_basis(k, sprite.dtype, sprite.device)
    mx = torch.einsum("...s,siq->...iq", px, basis)   # (..., k, 2k)
    my = torch.einsum("...s,sjr->...jr", py, basis)
    out = torch.einsum("...cyi,...iq->...cyq", sprite, mx)   # x shift
    out = torch.einsum("...cjq,...jr->...crq", out, my)      # y shift
    return out


def hard_offsets(p: torch.Tensor, k: int) -> np.ndarray:
    """Argmax offset per axis; ties break to smaller magnitude, then negative."""
    probs = p.detach().cpu().numpy()
    offs = offset_values(k)
    lead = probs.shape[:-1]
    flat = probs.reshape(-1, k + 1)
    keys_mag = np.broadcast_to(np.abs(offs), flat.shape)
    keys_off = np.broadcast_to(offs, flat.shape)
    order = np.lexsort((keys_off, keys_mag, -flat), axis=-1)
    return offs[order[:, 0]].reshape(lead)


class OffsetPredictor(nn.Module):
    """Predicts per-anchor shift distributions from the frame crop around the
    anchor concatenated with the anchor's sprite (7 channels total).

    Trunk mirrors the frame encoder's downsampling architecture; its output is
    pooled spatially and fed to a one-hidden-layer perceptron producing
    2(k+1) logits split into independent x and y softmaxes.
    """

    def __init__(self, k: int, d: int, groups: int = 8, leaky_slope: float = 0.2,
                 channel_base: int = 64, channel_cap: int = 256):
        super().__init__()
        self.k = k
        self.trunk = EncoderTrunk(7, k, channel_base, channel_cap, groups, leaky_slope)
        self.head = VectorMLPHead(self.trunk.out_channels, d, 2 * (k + 1),
                                  groups, leaky_slope)

    def forward(self, crops: torch.Tensor, sprites: torch.Tensor,
                masks: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """crops: (N, 3, k, k) frame windows (zero-filled outside the frame,
        with `masks` marking validity); sprites: (N, 4, k, k)."""
        if crops.shape[-2:] != sprites.shape[-2:]:
            raise ValueError(
                f"crop {tuple(crops.shape[-2:])} and sprite {tuple(sprites.shape[-2:])} "
                "windows must have identical spatial dims")
        x = torch.cat([crops, sprites], dim=1)
        feats, _ = self.trunk(x, masks)
        pooled = feats.mean(dim=(2, 3))
        logits = self.head(pooled)
        px = F.softmax(logits[..., : self.k + 1], dim=-1)
        py = F.softmax(logits[..., self.k + 1 :], dim=-1)
        return px, py
