"""spritefactor: self-supervised sprite decomposition by differentiable
compositing.

A frame collection is explained as a learned dictionary of RGBA sprites
placed on layered anchor grids, trained end to end against a reconstruction
loss, then exported as an editable decomposition package.
"""

from .config import ConfigError, DatasetSpec, ModelConfig, RunConfig, TrainConfig
from .dataset import (Frame, SyntheticScene, default_sprite_bank,
                      generate_floating_sprites, load_frames, sample_crop)
from .dictionary import SpriteDictionary, SpriteGenerator, init_dictionary
from .encoder import AnchorGrid, EncoderConfig, FrameEncoder
from .model import Decomposition, SpriteModel
from .selection import Placement, assemble_soft_sprite, harden, score_anchors
from .transform import OffsetPredictor, soft_shift

__version__ = "0.1.0"

__all__ = [
    "AnchorGrid", "ConfigError", "DatasetSpec", "Decomposition", "EncoderConfig",
    "Frame", "FrameEncoder", "ModelConfig", "OffsetPredictor", "Placement",
    "RunConfig", "SpriteDictionary", "SpriteGenerator", "SpriteModel",
    "SyntheticScene", "TrainConfig", "assemble_soft_sprite", "default_sprite_bank",
    "generate_floating_sprites", "harden", "init_dictionary", "load_frames",
    "sample_crop", "score_anchors", "soft_shift", "__version__",
]
