"""Sprite dictionary: m trainable latent codes plus the generator network
that decodes each code into an RGBA k x k patch."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import normalize_vectors


class SpriteGenerator(nn.Module):
    """Decodes latent codes into RGBA patches.

    Pipeline per code: per-code zero-mean/unit-variance normalization (no
    affine) -> fully-connected d -> 8d -> grouped-channel normalization ->
    ReLU -> fully-connected 8d -> 4k^2 -> sigmoid -> reshape to 4 x k x k.
    The leading normalization makes decoding invariant to per-code affine
    reparameterizations of the latents.
    """

    def __init__(self, d: int, k: int, groups: int = 8):
        super().__init__()
        self.d = d
        self.k = k
        self.fc1 = nn.Linear(d, 8 * d)
        self.norm = nn.GroupNorm(groups, 8 * d)
        self.fc2 = nn.Linear(8 * d, 4 * k * k)

    def forward(self, latents: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(latents).all():
            raise FloatingPointError("latent codes contain non-finite values")
        z = normalize_vectors(latents, dim=-1)
        h = F.relu(self.norm(self.fc1(z)))
        rgba = torch.sigmoid(self.fc2(h))
        return rgba.view(*latents.shape[:-1], 4, self.k, self.k)


class SpriteDictionary(nn.Module):
    """m latent codes of dimension d, decoded on demand into m sprites."""

    def __init__(self, m: int, d: int, k: int, groups: int = 8,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.m = m
        self.d = d
        self.k = k
        if m < 1 or d < 1:
            raise ValueError(f"need m >= 1 and d >= 1, got m={m} d={d}")
        latents = torch.empty(m, d)
        if generator is not None:
            latents.normal_(generator=generator)
        else:
            latents.normal_()
        self.latents = nn.Parameter(latents)
        self.generator = SpriteGenerator(d, k, groups)

    def normalized_latents(self) -> torch.Tensor:
        """Latent codes after per-code normalization, as used for scoring."""
        return normalize_vectors(self.latents, dim=-1)

    def decode(self) -> torch.Tensor:
        """All m sprites as an (m, 4, k, k) tensor with values in (0, 1)."""
        return self.generator(self.latents)

    def forward(self) -> torch.Tensor:
        return self.decode()


def init_dictionary(m: int, d: int, k: int = 32, groups: int = 8,
                    seed: int | None = None) -> SpriteDictionary:
    """Fresh dictionary with i.i.d. standard-normal latent codes."""
    gen = None
    if seed is not None:
        gen = torch.Generator().manual_seed(seed)
    return SpriteDictionary(m, d, k, groups, generator=gen)
