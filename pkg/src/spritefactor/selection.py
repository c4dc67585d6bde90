"""Anchor-to-dictionary sprite selection.

Training uses soft selection: a softmax over scaled dot products between each
(normalized) anchor feature and every (normalized) latent code yields a
row-stochastic score grid, and each anchor's sprite is the score-weighted
mixture of the decoded dictionary masked by the anchor's switch probability.
Inference hardens both: argmax sprite index and thresholded switches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass
class Placement:
    """One anchor's resolved assignment after hardening."""

    layer: int
    row: int
    col: int
    sprite: int
    dy: int = 0
    dx: int = 0
    active: bool = True


def score_anchors(features: torch.Tensor, latents: torch.Tensor) -> torch.Tensor:
    """Softmax over dot products scaled by 1/sqrt(d).

    features: (..., d) per-vector normalized anchor features.
    latents: (m, d) per-code normalized dictionary codes.
    Returns (..., m) rows that are non-negative and sum to 1.
    """
    d = features.shape[-1]
    logits = features @ latents.transpose(0, 1) / math.sqrt(d)
    return F.softmax(logits, dim=-1)


def assemble_soft_sprite(scores: torch.Tensor, switches: torch.Tensor,
                         patches: torch.Tensor) -> torch.Tensor:
    """Per-anchor soft sprite: switch * sum_i score_i * patch_i.

    scores: (..., m), switches: (...), patches: (m, 4, k, k).
    Returns (..., 4, k, k); fully differentiable in all three inputs.
    """
    m = patches.shape[0]
    mixed = scores @ patches.reshape(m, -1)
    mixed = mixed.reshape(*scores.shape[:-1], *patches.shape[1:])
    return switches[..., None, None, None] * mixed


def harden(scores: torch.Tensor, switches: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Hard assignments: argmax sprite index (ties -> lowest index) and
    active = switch >= 0.5."""
    indices = torch.argmax(scores, dim=-1)
    active = switches >= 0.5
    return indices, active
