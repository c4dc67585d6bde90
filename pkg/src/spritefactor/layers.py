"""Shared neural building blocks: per-vector normalization, partial
convolutions, and the downsampling trunk used by both the frame encoder and
the offset predictor."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

NORM_EPS = 1e-8


def normalize_vectors(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Zero-mean unit-variance normalization along `dim`, no affine terms."""
    mean = x.mean(dim=dim, keepdim=True)
    var = x.var(dim=dim, unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + NORM_EPS)


class PartialConv2d(nn.Module):
    """3x3 stride-2 convolution renormalized by the valid fraction of each
    kernel window.

    The mask is single-channel with values in {0,1}; padded border taps count
    as invalid, so interior windows reduce to a plain convolution while border
    windows are rescaled by (window size / valid taps). Windows with no valid
    tap produce 0 and an invalid output mask entry.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 2):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size,
                              stride=stride, padding=kernel_size // 2, bias=False)
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.register_buffer("mask_kernel", torch.ones(1, 1, kernel_size, kernel_size))
        self.window_size = float(kernel_size * kernel_size)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.conv(x * mask)
        with torch.no_grad():
            valid = F.conv2d(mask, self.mask_kernel.to(mask.dtype),
                             stride=self.conv.stride, padding=self.conv.padding)
            new_mask = (valid > 0).to(mask.dtype)
            scale = torch.where(valid > 0, self.window_size / valid.clamp(min=1.0),
                                torch.zeros_like(valid))
        out = out * scale + self.bias.view(1, -1, 1, 1)
        out = out * new_mask
        return out, new_mask


class PartialConvBlock(nn.Module):
    """Partial conv (3x3, stride 2) + grouped-channel normalization + leaky ReLU."""

    def __init__(self, in_channels: int, out_channels: int, groups: int = 8, leaky_slope: float = 0.2):
        super().__init__()
        self.pconv = PartialConv2d(in_channels, out_channels)
        self.norm = nn.GroupNorm(groups, out_channels)
        self.leaky_slope = leaky_slope

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out, mask = self.pconv(x, mask)
        out = F.leaky_relu(self.norm(out), self.leaky_slope)
        return out, mask


class EncoderTrunk(nn.Module):
    """log2(k)-1 downsampling blocks, so a k x k receptive patch maps to one
    grid cell of the 2w/k x 2h/k anchor grid (stride k/2)."""

    def __init__(self, in_channels: int, k: int, channel_base: int = 64,
                 channel_cap: int = 256, groups: int = 8, leaky_slope: float = 0.2):
        super().__init__()
        n_blocks = int(math.log2(k)) - 1
        blocks = []
        prev = in_channels
        width = channel_base
        for _ in range(n_blocks):
            blocks.append(PartialConvBlock(prev, width, groups, leaky_slope))
            prev = width
            width = min(width * 2, channel_cap)
        self.blocks = nn.ModuleList(blocks)
        self.out_channels = prev

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        if mask is None:
            mask = torch.ones(x.shape[0], 1, x.shape[2], x.shape[3],
                              dtype=x.dtype, device=x.device)
        for block in self.blocks:
            x, mask = block(x, mask)
        return x, mask


class VectorMLPHead(nn.Module):
    """One-hidden-layer perceptron over feature vectors: linear -> grouped
    normalization -> leaky ReLU -> linear. Input shape (..., in_features)."""

    def __init__(self, in_features: int, hidden: int, out_features: int,
                 groups: int = 8, leaky_slope: float = 0.2):
        super().__init__()
        self.fc1 = nn.Linear(in_features, hidden)
        self.norm = nn.GroupNorm(groups, hidden)
        self.fc2 = nn.Linear(hidden, out_features)
        self.leaky_slope = leaky_slope

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        lead = x.shape[:-1]
        h = self.fc1(x.reshape(-1, x.shape[-1]))
        h = F.leaky_relu(self.norm(h), self.leaky_slope)
        return self.fc2(h).reshape(*lead, -1)
