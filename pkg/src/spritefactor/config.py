"""Configuration objects shared across the pipeline.

Everything tunable lives in three dataclasses: ModelConfig (architecture),
TrainConfig (optimization), DatasetSpec (data source). RunConfig merges them
from a single TOML/JSON file plus command-line overrides, with precedence
flags > file > defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional


class ConfigError(ValueError):
    """Invalid or inconsistent configuration; message names the field."""


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    k: sprite/patch size in pixels, m: dictionary size, d: latent dimension,
    layers: number of depth layers of anchor grids.
    """

    k: int = 32
    m: int = 100
    d: int = 128
    layers: int = 2
    groups: int = 8
    leaky_slope: float = 0.2
    channel_base: int = 64
    channel_cap: int = 256
    background: str = "solid"  # "solid" | "texture"
    # Texture canvas is bg_width_factor * w wide and h tall (horizontal
    # scrolling headroom); crop offsets are enumerated at this pixel stride.
    bg_width_factor: int = 2
    bg_offset_stride: int = 4
    # Keep soft selection at test time (natural image / video mode).
    soft_inference: bool = False

    def validate(self) -> None:
        if self.k < 4 or not _is_power_of_two(self.k):
            raise ConfigError(f"k must be a power of two >= 4, got {self.k}")
        if self.m < 1:
            raise ConfigError(f"m must be >= 1, got {self.m}")
        if self.d < self.groups or self.d % self.groups != 0:
            raise ConfigError(
                f"d must be a multiple of groups={self.groups}, got {self.d}"
            )
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.background not in ("solid", "texture"):
            raise ConfigError(f"background must be 'solid' or 'texture', got {self.background!r}")
        if self.channel_base % self.groups != 0 or self.channel_cap % self.groups != 0:
            raise ConfigError("channel widths must be multiples of groups")

    def check_frame_dims(self, h: int, w: int) -> None:
        half = self.k // 2
        if h % half != 0 or w % half != 0:
            raise ConfigError(
                f"frame dims {w}x{h} must be multiples of k/2={half}"
            )

    def grid_shape(self, h: int, w: int) -> tuple[int, int]:
        """Anchor grid resolution (rows, cols) = 2h/k x 2w/k."""
        self.check_frame_dims(h, w)
        return 2 * h // self.k, 2 * w // self.k


@dataclass
class TrainConfig:
    """Optimization recipe: AdamW, batch 8, lr 1e-4 (background 1e-3)."""

    batch: int = 8
    lr: float = 1e-4
    background_lr: float = 1e-3
    prior_weight: float = 1e-4
    weight_decay: float = 0.01
    max_steps: int = 20000
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 50

    def validate(self) -> None:
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.lr <= 0 or self.background_lr <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.prior_weight < 0:
            raise ConfigError(f"prior_weight must be >= 0, got {self.prior_weight}")
        if self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")


@dataclass
class DatasetSpec:
    """Where frames come from.

    source: "frame-directory" | "single-image" | "synthetic".
    crop: optional (cw, ch) training crop (required for single-image).
    Synthetic options control the floating-sprites generator.
    """

    source: str = "frame-directory"
    path: Optional[str] = None
    crop: Optional[tuple[int, int]] = None
    seed: int = 0
    synth_frames: int = 256
    synth_canvas: tuple[int, int] = (128, 128)
    synth_sprites: int = 11
    synth_sprite_size: int = 32

    def validate(self, model: Optional[ModelConfig] = None) -> None:
        if self.source not in ("frame-directory", "single-image", "synthetic"):
            raise ConfigError(f"source must be one of frame-directory/single-image/synthetic, got {self.source!r}")
        if self.source in ("frame-directory", "single-image") and not self.path:
            raise ConfigError(f"dataset path is required for source={self.source!r}")
        if self.source == "single-image" and self.crop is None:
            raise ConfigError("single-image source requires a crop size")
        if self.crop is not None and model is not None:
            cw, ch = self.crop
            half = model.k // 2
            if cw % half != 0 or ch % half != 0:
                raise ConfigError(f"crop dims {cw}x{ch} must be multiples of k/2={half}")
        if self.source == "synthetic" and self.synth_frames <= 0:
            raise ConfigError(f"synth_frames must be > 0, got {self.synth_frames}")


@dataclass
class RunConfig:
    """ModelConfig + TrainConfig + DatasetSpec merged from file and flags."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.dataset.validate(self.model)
        if self.model.background == "texture" and self.dataset.source == "single-image":
            raise ConfigError(
                "background='texture' requires a frame sequence; single-image crops "
                "have no stable per-frame offset (use background='solid')"
            )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        def build(dc_type, section):
            fields = {f.name: f for f in dataclasses.fields(dc_type)}
            unknown = set(section) - set(fields)
            if unknown:
                raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
            kwargs = {}
            for key, value in section.items():
                if key in ("crop", "synth_canvas") and value is not None:
                    value = tuple(value)
                kwargs[key] = value
            return dc_type(**kwargs)

        return cls(
            model=build(ModelConfig, data.get("model", {})),
            train=build(TrainConfig, data.get("train", {})),
            dataset=build(DatasetSpec, data.get("dataset", {})),
        )


def load_config_file(path: str | Path) -> dict:
    """Read a TOML or JSON config file into a nested dict."""
    path = Path(path)
    text = path.read_bytes()
    if path.suffix.lower() == ".json":
        return json.loads(text)
    try:
        import tomllib  # Python >= 3.11
    except ModuleNotFoundError:
        import tomli as tomllib
    return tomllib.loads(text.decode("utf-8"))


def load_run_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from an optional file plus {section.field: value} overrides."""
    data: dict = load_config_file(path) if path else {}
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, name = dotted.partition(".")
        if not name:
            raise ConfigError(f"override key must look like 'section.field', got {dotted!r}")
        data.setdefault(section, {})[name] = value
    cfg = RunConfig.from_dict(data)
    cfg.validate()
    return cfg
