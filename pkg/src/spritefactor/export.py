"""Decomposition packages: a sprite atlas, a JSON placement manifest, the
background assets, and the hard reconstructions, laid out so that an editor
can re-render and modify every frame.

Package layout: atlas.png, manifest.json (schema "v1"), background.png in
texture mode, frames/recon_%05d.png. Re-rendering a freshly exported manifest
reproduces the stored reconstructions exactly at 8-bit, because hard
rendering everywhere works from the same 8-bit-quantized assets the package
stores.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import compositor
from .dataset import Frame
from .model import Decomposition, SpriteModel, render_placements
from .selection import Placement

SCHEMA_VERSION = "v1"


def manifest_schema() -> dict:
    text = resources.files("spritefactor.schemas").joinpath("manifest_v1.schema.json").read_text()
    return json.loads(text)


def validate_manifest(manifest: dict) -> None:
    """Schema-check a manifest; raises with the offending JSON path."""
    import jsonschema

    try:
        jsonschema.validate(manifest, manifest_schema())
    except jsonschema.ValidationError as err:
        raise ValueError(f"manifest schema error at {err.json_path}: {err.message}") from err


def atlas_grid(m: int) -> int:
    return max(1, math.ceil(math.sqrt(m)))


def build_atlas(patches_u8: np.ndarray, order: list[int]) -> tuple[np.ndarray, dict]:
    """Row-major atlas of (m, k, k, 4) uint8 sprites in the given order;
    returns the atlas image and the sprite_id -> [x, y] index."""
    m, k = patches_u8.shape[0], patches_u8.shape[1]
    cols = atlas_grid(m)
    rows = math.ceil(m / cols)
    atlas = np.zeros((rows * k, cols * k, 4), dtype=np.uint8)
    index = {}
    for rank, sprite_id in enumerate(order):
        y, x = (rank // cols) * k, (rank % cols) * k
        atlas[y : y + k, x : x + k] = patches_u8[sprite_id]
        index[str(sprite_id)] = [x, y]
    return atlas, index


def export_decomposition(model: SpriteModel, frames: list[Frame],
                         out_dir: str | Path) -> Path:
    """Hard-decompose every frame and write the package; returns the
    manifest path. Atlas cells are ordered by usage frequency, descending."""
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)

    decomps: list[Decomposition] = []
    for frame in frames:
        tensor = torch.as_tensor(frame.pixels)
        decomps.append(model.decompose(tensor, frame.index))

    usage = np.zeros(model.cfg.m, dtype=np.int64)
    for d in decomps:
        for p in d.placements:
            if p.active:
                usage[p.sprite] += 1
    order = sorted(range(model.cfg.m), key=lambda i: (-usage[i], i))

    patches = model.quantized_patches()
    patches_u8 = np.round(patches.numpy() * 255.0).astype(np.uint8).transpose(0, 2, 3, 1)
    atlas, index = build_atlas(patches_u8, order)
    Image.fromarray(atlas, mode="RGBA").save(out_dir / "atlas.png")

    if model.background.mode == "solid":
        color = np.round(model.background.color.detach().numpy() * 255.0).astype(int)
        background = {"mode": "solid", "color": [int(c) for c in color]}
    else:
        tex = model.background.texture().detach()
        tex_u8 = np.round(tex.numpy() * 255.0).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(tex_u8, mode="RGB").save(out_dir / "background.png")
        offsets = [list(model.background.hard_offsets(d.frame_index)) for d in decomps]
        background = {"mode": "texture", "file": "background.png", "offsets": offsets}

    frame_entries = []
    for i, decomp in enumerate(decomps):
        recon = model.render_decomposition(decomp)
        u8 = np.clip(np.round(recon * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
        name = f"frames/recon_{i:05d}.png"
        Image.fromarray(u8, mode="RGB").save(out_dir / name)
        frame_entries.append({
            "index": decomp.frame_index,
            "file": name,
            "placements": [{"layer": p.layer, "row": p.row, "col": p.col,
                            "sprite_id": p.sprite, "dx": p.dx, "dy": p.dy,
                            "active": p.active} for p in decomp.placements],
        })

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "model": {"k": model.cfg.k, "m": model.cfg.m, "d": model.cfg.d,
                  "layers": model.cfg.layers},
        "frame_size": [model.frame_height, model.frame_width],
        "background": background,
        "atlas": {"file": "atlas.png", "cell": model.cfg.k,
                  "cols": atlas_grid(model.cfg.m), "index": index},
        "frames": frame_entries,
    }
    validate_manifest(manifest)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


@dataclass
class Package:
    directory: Path
    manifest: dict
    patches: torch.Tensor  # (m, 4, k, k) float64 from the atlas


def load_package(directory: str | Path) -> Package:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    validate_manifest(manifest)
    k = manifest["atlas"]["cell"]
    m = manifest["model"]["m"]
    with Image.open(directory / manifest["atlas"]["file"]) as img:
        atlas = np.asarray(img.convert("RGBA")).astype(np.float64) / 255.0
    patches = torch.zeros(m, 4, k, k, dtype=torch.float64)
    for sid_str, (x, y) in manifest["atlas"]["index"].items():
        cell = atlas[y : y + k, x : x + k].transpose(2, 0, 1)
        patches[int(sid_str)] = torch.from_numpy(cell.copy())
    return Package(directory=directory, manifest=manifest, patches=patches)


def _find_frame_entry(manifest: dict, frame_index: int) -> dict:
    for entry in manifest["frames"]:
        if entry["index"] == frame_index:
            return entry
    raise ValueError(f"frame index {frame_index} not present in manifest")


def package_background(pkg: Package, frame_index: int) -> torch.Tensor:
    h, w = pkg.manifest["frame_size"]
    bg = pkg.manifest["background"]
    if bg["mode"] == "solid":
        color = torch.tensor(bg["color"], dtype=torch.float64) / 255.0
        return color.view(3, 1, 1).expand(3, h, w).clone()
    with Image.open(pkg.directory / bg["file"]) as img:
        tex = np.asarray(img.convert("RGB")).astype(np.float64) / 255.0
    entry_pos = [e["index"] for e in pkg.manifest["frames"]].index(frame_index)
    y, x = bg["offsets"][entry_pos]
    return torch.from_numpy(tex.transpose(2, 0, 1)[:, y : y + h, x : x + w].copy())


def render_manifest(pkg: Package | str | Path, frame_index: int) -> np.ndarray:
    """Deterministic re-render of one manifest frame from the package assets
    (placements paint in list order per layer). Returns (3, h, w) float64."""
    if not isinstance(pkg, Package):
        pkg = load_package(pkg)
    entry = _find_frame_entry(pkg.manifest, frame_index)
    placements = [Placement(layer=p["layer"], row=p["row"], col=p["col"],
                            sprite=p["sprite_id"], dy=p["dy"], dx=p["dx"],
                            active=p["active"]) for p in entry["placements"]]
    h, w = pkg.manifest["frame_size"]
    background = package_background(pkg, frame_index)
    return render_placements(placements, pkg.patches, background,
                             pkg.manifest["model"]["k"],
                             pkg.manifest["model"]["layers"], h, w)


def write_conformance_vectors(path: str | Path, n_random: int = 64, seed: int = 0) -> Path:
    """Straight-alpha over test vectors shared with the editor UI: random
    RGBA pixel pairs plus the endpoint cases, with float64 expected outputs."""
    rng = np.random.default_rng(seed)
    cases = []
    fgs = [np.array([1.0, 1.0, 1.0, 0.5]), np.array([0.3, 0.6, 0.9, 0.0]),
           np.array([0.2, 0.4, 0.8, 1.0]), np.array([0.5, 0.5, 0.5, 0.25])]
    bgs = [np.array([0.0, 0.0, 0.0, 1.0]), np.array([0.1, 0.2, 0.3, 0.0]),
           np.array([0.9, 0.1, 0.4, 0.5]), np.array([0.0, 0.0, 0.0, 0.0])]
    pairs = [(fg, bg) for fg in fgs for bg in bgs]
    pairs += [(rng.uniform(size=4), rng.uniform(size=4)) for _ in range(n_random)]
    for fg, bg in pairs:
        out = compositor.alpha_over(torch.as_tensor(fg, dtype=torch.float64),
                                    torch.as_tensor(bg, dtype=torch.float64))
        cases.append({"fg": list(fg), "bg": list(bg), "out": out.tolist()})
    path = Path(path)
    path.write_text(json.dumps({"op": "alpha_over_straight", "cases": cases}, indent=1))
    return path
