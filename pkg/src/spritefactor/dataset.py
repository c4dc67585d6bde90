"""Frame ingestion, training crops, and the synthetic floating-sprites
benchmark with ground-truth placements.

Frames are float32 arrays of shape (3, h, w) with values in [0, 1]; 8-bit PNG
is the canonical on-disk format and normalization is value/255. Frame order is
the lexicographic filename order. All generators take an explicit seeded
numpy Generator; nothing reads global randomness.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


@dataclass
class Frame:
    pixels: np.ndarray  # (3, h, w) float32 in [0, 1]
    index: int = 0

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


@dataclass
class SyntheticScene:
    """One floating-sprites frame plus its ground truth.

    truth holds (sprite_id, x, y) with (x, y) the placed sprite's top-left in
    pixels (origin top-left, y down). truth_masks are per-instance boolean
    (h, w) footprints (alpha >= 0.5), unoccluded. Standard generation places
    between 5 and 15 instances, all fully inside the canvas.
    """

    frame: Frame
    truth: list[tuple[int, int, int]] = field(default_factory=list)
    truth_masks: list[np.ndarray] = field(default_factory=list)


def _to_frame(arr_u8: np.ndarray, index: int) -> Frame:
    chw = arr_u8.astype(np.float32).transpose(2, 0, 1) / 255.0
    return Frame(pixels=chw, index=index)


def load_image(path: str | Path) -> np.ndarray:
    """8-bit RGB (h, w, 3) array from an image file."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def load_frames(path: str | Path) -> list[Frame]:
    """All image files under `path`, in filename order, normalized to [0, 1].

    Rejects an empty directory and mixed frame dimensions (naming the
    offending file).
    """
    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"no image files found in {path}")
    frames = []
    dims = None
    for i, file in enumerate(files):
        arr = load_image(file)
        if dims is None:
            dims = arr.shape[:2]
        elif arr.shape[:2] != dims:
            raise ValueError(
                f"mixed frame dimensions: {file.name} is {arr.shape[1]}x{arr.shape[0]}, "
                f"expected {dims[1]}x{dims[0]}")
        frames.append(_to_frame(arr, i))
    return frames


def frame_to_uint8(frame_or_pixels) -> np.ndarray:
    """(3, h, w) float RGB in [0, 1] -> (h, w, 3) uint8."""
    pixels = frame_or_pixels.pixels if isinstance(frame_or_pixels, Frame) else frame_or_pixels
    arr = np.asarray(pixels, dtype=np.float64)
    return np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def save_frame(frame: Frame, path: str | Path) -> None:
    Image.fromarray(frame_to_uint8(frame)).save(path)


def save_frames(frames: Iterable[Frame], directory: str | Path,
                pattern: str = "frame_{:05d}.png") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(frames):
        p = directory / pattern.format(i)
        save_frame(frame, p)
        paths.append(p)
    return paths


def sample_crop(frame: Frame, cw: int, ch: int, rng: np.random.Generator) -> Frame:
    """Contiguous (ch, cw) sub-window at an offset uniform over all valid
    positions."""
    if cw > frame.width or ch > frame.height:
        raise ValueError(
            f"crop {cw}x{ch} larger than frame {frame.width}x{frame.height}")
    x = int(rng.integers(0, frame.width - cw + 1))
    y = int(rng.integers(0, frame.height - ch + 1))
    return Frame(pixels=frame.pixels[:, y : y + ch, x : x + cw], index=frame.index)


# --- procedural sprite bank -------------------------------------------------

def _sprite_color(i: int, n: int = 11) -> tuple[float, float, float]:
    return colorsys.hsv_to_rgb((i * 0.61803) % 1.0, 0.85, 0.92)


def _coverage(dist: np.ndarray) -> np.ndarray:
    """Signed distance (px) -> soft coverage in [0, 1] with a ~1px edge."""
    return np.clip(0.5 - dist, 0.0, 1.0)


def _segment_dist(yy, xx, p0, p1, radius):
    py, px_ = yy - p0[0], xx - p0[1]
    vy, vx = p1[0] - p0[0], p1[1] - p0[1]
    t = np.clip((py * vy + px_ * vx) / max(vy * vy + vx * vx, 1e-9), 0.0, 1.0)
    return np.hypot(py - t * vy, px_ - t * vx) - radius


def default_sprite_bank(size: int = 32) -> list[np.ndarray]:
    """11 procedurally drawn RGBA sprites (disks, rings, triangles, letter
    strokes) with anti-aliased, non-square alpha boundaries. Values are
    quantized to the 8-bit grid so that saving and reloading is lossless."""
    s = size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    c = s / 2.0
    r = s * 0.38
    bar = max(s * 0.12, 1.0)
    lo, hi = s * 0.2, s * 0.8

    def disk(cy, cx, rad):
        return np.hypot(yy - cy, xx - cx) - rad

    shapes = []
    shapes.append(_coverage(disk(c, c, r)))                                   # disk
    shapes.append(_coverage(np.abs(disk(c, c, r * 0.85)) - bar))              # ring
    tri = np.maximum.reduce([                                                 # triangle
        yy - (s * 0.85),
        (c - xx) * 0.9 + (yy - s * 0.85) * -0.55,
        (xx - c) * 0.9 + (yy - s * 0.85) * -0.55,
    ])
    shapes.append(_coverage(tri))
    shapes.append(_coverage((np.abs(yy - c) + np.abs(xx - c)) - r * 1.1))     # diamond
    shapes.append(_coverage(np.minimum(                                       # plus
        np.maximum(np.abs(yy - c) - bar, np.abs(xx - c) - r),
        np.maximum(np.abs(xx - c) - bar, np.abs(yy - c) - r))))
    shapes.append(_coverage(np.minimum(                                       # T
        _segment_dist(yy, xx, (lo, lo), (lo, hi), bar),
        _segment_dist(yy, xx, (lo, c), (hi, c), bar))))
    shapes.append(_coverage(np.minimum(                                       # L
        _segment_dist(yy, xx, (lo, lo), (hi, lo), bar),
        _segment_dist(yy, xx, (hi, lo), (hi, hi), bar))))
    shapes.append(_coverage(np.minimum(                                       # X
        _segment_dist(yy, xx, (lo, lo), (hi, hi), bar),
        _segment_dist(yy, xx, (lo, hi), (hi, lo), bar))))
    shapes.append(_coverage(np.minimum.reduce([                               # H
        _segment_dist(yy, xx, (lo, lo), (hi, lo), bar),
        _segment_dist(yy, xx, (lo, hi), (hi, hi), bar),
        _segment_dist(yy, xx, (c, lo), (c, hi), bar)])))
    crescent = np.maximum(disk(c, c, r), -disk(c, c + r * 0.55, r * 0.75))    # crescent
    shapes.append(_coverage(crescent))
    shapes.append(_coverage(np.maximum(np.abs(yy - c), np.abs(xx - c)) - r * 0.8
                            + 0.35 * np.sin(xx * 2.2) * 0.5))                 # wavy square

    bank = []
    for i, alpha in enumerate(shapes):
        rgb = _sprite_color(i)
        rgba = np.empty((4, s, s), dtype=np.float64)
        for ch in range(3):
            rgba[ch] = rgb[ch]
        rgba[3] = alpha
        bank.append(np.round(rgba * 255.0) / 255.0)
    return bank


# --- floating-sprites generation ---------------------------------------------

def _over_straight(fg_rgb, fg_a, bg_rgb, bg_a):
    """Straight-alpha Porter-Duff over; the reference arithmetic every other
    renderer in the project must reproduce bit-for-bit at float64."""
    out_a = fg_a + bg_a * (1.0 - fg_a)
    num = fg_a * fg_rgb + bg_a * bg_rgb * (1.0 - fg_a)
    out_rgb = np.where(out_a > 0, num / np.where(out_a > 0, out_a, 1.0), 0.0)
    return out_rgb, out_a


def composite_instances(instances: Sequence[tuple[int, int, int]],
                        bank: Sequence[np.ndarray],
                        height: int, width: int) -> np.ndarray:
    """Alpha-composite (sprite_id, x, y) instances over a white canvas, in
    list order (later entries painted over earlier). Returns (3, h, w)
    float64 before 8-bit quantization."""
    rgb = np.ones((3, height, width), dtype=np.float64)
    alpha = np.ones((1, height, width), dtype=np.float64)
    for sprite_id, x, y in instances:
        patch = np.asarray(bank[sprite_id], dtype=np.float64)
        s = patch.shape[-1]
        region_rgb = rgb[:, y : y + s, x : x + s]
        region_a = alpha[:, y : y + s, x : x + s]
        out_rgb, out_a = _over_straight(patch[:3], patch[3:4], region_rgb, region_a)
        rgb[:, y : y + s, x : x + s] = out_rgb
        alpha[:, y : y + s, x : x + s] = out_a
    return rgb


def _quantize_frame(rgb64: np.ndarray, index: int) -> Frame:
    u8 = np.clip(np.round(rgb64 * 255.0), 0, 255).astype(np.uint8)
    return Frame(pixels=u8.astype(np.float32) / 255.0, index=index)


def iter_floating_sprites(n_frames: int, sprite_bank: Sequence[np.ndarray],
                          rng: np.random.Generator,
                          canvas: tuple[int, int] = (128, 128),
                          counts: tuple[int, int] = (5, 15)) -> Iterator[SyntheticScene]:
    """Scenes with a uniform instance count in `counts`, sprites drawn
    uniformly from the bank and placed uniformly (fully inside the canvas),
    composited over white. Later placements occlude earlier ones."""
    if n_frames <= 0:
        raise ValueError(f"n_frames must be > 0, got {n_frames}")
    if not sprite_bank:
        raise ValueError("sprite bank is empty")
    height, width = canvas
    for idx in range(n_frames):
        count = int(rng.integers(counts[0], counts[1] + 1))
        instances = []
        masks = []
        for _ in range(count):
            sid = int(rng.integers(0, len(sprite_bank)))
            s = sprite_bank[sid].shape[-1]
            x = int(rng.integers(0, width - s + 1))
            y = int(rng.integers(0, height - s + 1))
            instances.append((sid, x, y))
            mask = np.zeros((height, width), dtype=bool)
            mask[y : y + s, x : x + s] = sprite_bank[sid][3] >= 0.5
            masks.append(mask)
        rgb = composite_instances(instances, sprite_bank, height, width)
        yield SyntheticScene(frame=_quantize_frame(rgb, idx), truth=instances,
                             truth_masks=masks)


def generate_floating_sprites(n_frames: int, sprite_bank: Sequence[np.ndarray],
                              rng: np.random.Generator,
                              canvas: tuple[int, int] = (128, 128),
                              counts: tuple[int, int] = (5, 15)) -> list[SyntheticScene]:
    return list(iter_floating_sprites(n_frames, sprite_bank, rng, canvas, counts))


# --- synthetic dataset on disk -----------------------------------------------

def write_synthetic_dataset(scenes: Iterable[SyntheticScene],
                            sprite_bank: Sequence[np.ndarray],
                            directory: str | Path) -> Path:
    """PNG frames plus truth.json (per-frame instance lists with top-left
    pixel coordinates) and the sprite bank as RGBA PNGs."""
    directory = Path(directory)
    (directory / "sprites").mkdir(parents=True, exist_ok=True)
    sprite_files = []
    for i, sprite in enumerate(sprite_bank):
        u8 = np.clip(np.round(np.asarray(sprite) * 255.0), 0, 255).astype(np.uint8)
        name = f"sprites/sprite_{i:02d}.png"
        Image.fromarray(u8.transpose(1, 2, 0), mode="RGBA").save(directory / name)
        sprite_files.append(name)
    entries = []
    canvas = None
    for i, scene in enumerate(scenes):
        name = f"frame_{i:05d}.png"
        save_frame(scene.frame, directory / name)
        canvas = [scene.frame.height, scene.frame.width]
        entries.append({
            "frame": name,
            "instances": [{"sprite_id": sid, "x": x, "y": y} for sid, x, y in scene.truth],
        })
    truth = {"canvas": canvas, "sprites": sprite_files, "frames": entries}
    (directory / "truth.json").write_text(json.dumps(truth, indent=1))
    return directory / "truth.json"


def load_synthetic_dataset(directory: str | Path) -> tuple[list[SyntheticScene], list[np.ndarray]]:
    """Inverse of write_synthetic_dataset; truth masks are recomputed from
    the stored sprite bank."""
    directory = Path(directory)
    truth = json.loads((directory / "truth.json").read_text())
    bank = []
    for name in truth["sprites"]:
        with Image.open(directory / name) as img:
            arr = np.asarray(img.convert("RGBA")).astype(np.float64) / 255.0
        bank.append(arr.transpose(2, 0, 1))
    scenes = []
    for i, entry in enumerate(truth["frames"]):
        arr = load_image(directory / entry["frame"])
        frame = _to_frame(arr, i)
        instances = [(inst["sprite_id"], inst["x"], inst["y"]) for inst in entry["instances"]]
        masks = []
        for sid, x, y in instances:
            s = bank[sid].shape[-1]
            mask = np.zeros((frame.height, frame.width), dtype=bool)
            mask[y : y + s, x : x + s] = bank[sid][3] >= 0.5
            masks.append(mask)
        scenes.append(SyntheticScene(frame=frame, truth=instances, truth_masks=masks))
    return scenes, bank
