"""Frame encoder: maps an RGB frame to per-layer anchor grids of feature
vectors and switch probabilities."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .layers import EncoderTrunk, VectorMLPHead, normalize_vectors


@dataclass
class EncoderConfig:
    k: int = 32
    d: int = 128
    layers: int = 2
    leaky_slope: float = 0.2
    groups: int = 8
    channel_base: int = 64
    channel_cap: int = 256


@dataclass
class AnchorGrid:
    """Per-layer anchor grids for a batch of frames.

    features: (B, layers, Gh, Gw, d), each vector zero-mean/unit-variance.
    switches: (B, layers, Gh, Gw) in [0, 1].
    """

    features: torch.Tensor
    switches: torch.Tensor

    @property
    def grid_hw(self) -> tuple[int, int]:
        return self.features.shape[2], self.features.shape[3]


class LayerHead(nn.Module):
    """Per-layer head on top of the shared trunk: a 1x1 projection to
    intermediate d-vectors (normalized per vector), a switch perceptron with a
    sigmoid output, and a linear feature projection with a second per-vector
    normalization."""

    def __init__(self, in_channels: int, d: int, groups: int, leaky_slope: float):
        super().__init__()
        self.intermediate = nn.Conv2d(in_channels, d, kernel_size=1)
        self.switch_mlp = VectorMLPHead(d, d, 1, groups, leaky_slope)
        self.feature_proj = nn.Linear(d, d)

    def forward(self, trunk_out: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        inter = self.intermediate(trunk_out)            # (B, d, Gh, Gw)
        inter = inter.permute(0, 2, 3, 1)               # (B, Gh, Gw, d)
        inter = normalize_vectors(inter, dim=-1)
        switches = torch.sigmoid(self.switch_mlp(inter).squeeze(-1))
        features = normalize_vectors(self.feature_proj(inter), dim=-1)
        return features, switches


class FrameEncoder(nn.Module):
    """Shared partial-conv trunk plus one head per depth layer."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.trunk = EncoderTrunk(3, cfg.k, cfg.channel_base, cfg.channel_cap,
                                  cfg.groups, cfg.leaky_slope)
        self.heads = nn.ModuleList(
            LayerHead(self.trunk.out_channels, cfg.d, cfg.groups, cfg.leaky_slope)
            for _ in range(cfg.layers)
        )

    def forward(self, frames: torch.Tensor) -> AnchorGrid:
        """frames: (B, 3, h, w) with h, w multiples of k/2."""
        _, _, h, w = frames.shape
        half = self.cfg.k // 2
        if h % half != 0 or w % half != 0:
            raise ValueError(f"frame dims {w}x{h} must be multiples of k/2={half}")
        trunk_out, _ = self.trunk(frames)
        features, switches = zip(*(head(trunk_out) for head in self.heads))
        return AnchorGrid(features=torch.stack(features, dim=1),
                          switches=torch.stack(switches, dim=1))


def encode_frame(frames: torch.Tensor, encoder: FrameEncoder) -> AnchorGrid:
    """Functional alias; `frames` may be a single (3, h, w) frame."""
    if frames.dim() == 3:
        grid = encoder(frames.unsqueeze(0))
        return AnchorGrid(grid.features.squeeze(0), grid.switches.squeeze(0))
    return encoder(frames)
