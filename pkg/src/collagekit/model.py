"""Collage/layer data model: alpha compositing, visibility, project files.

A collage is a global prompt plus an ordered back-to-front stack of RGBA
layers, each owning a substring of the prompt and its own harmonization
controls. Layer indices are 1-based everywhere in the public API; index 0
in a visibility map means "no layer covers this cell".
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .imageops import bilinear_resize, block_mean, from_uint8, to_uint8

PROJECT_VERSION = 1

# Area-averaged alpha at or above this counts as covered when a visibility
# map is built below canvas resolution. At full resolution the rule is
# alpha > 0 exactly.
ALPHA_DOWNSAMPLE_THRESHOLD = 0.5


class CollageError(Exception):
    """Base for collage validation and project-format failures."""


class PlacementError(CollageError):
    pass


class SpanError(CollageError):
    pass


class ProjectFormatError(CollageError):
    pass


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Placement:
    """Maps a layer raster onto the canvas: top-left offset in pixels plus a
    uniform scale. Offsets are rounded to whole pixels at rasterization."""

    x: float = 0.0
    y: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise PlacementError(f"scale must be positive and finite, got {self.scale}")


@dataclass(frozen=True)
class Layer:
    """One RGBA layer: raster, placement, prompt span, and per-layer controls."""

    name: str
    image: np.ndarray  # (H, W, 4) float64 in [0, 1]
    text: str
    text_span: tuple[int, int]
    placement: Placement = Placement()
    noise_level: float = 0.5
    controlnet_weight: float = 0.0
    attn_pos_strength: float = 1.0
    attn_neg_strength: float = 1.0
    inverted_token: str | None = None  # asset reference, resolved by the project dir

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[2] != 4:
            raise CollageError(f"layer '{self.name}': image must be (H, W, 4), got {img.shape}")
        if img.size and (img.min() < 0 or img.max() > 1 or not np.isfinite(img).all()):
            raise CollageError(f"layer '{self.name}': RGBA values must lie in [0, 1]")
        object.__setattr__(self, "image", _freeze(img))
        object.__setattr__(self, "text_span", tuple(self.text_span))
        for attr in ("noise_level", "controlnet_weight"):
            v = getattr(self, attr)
            if not (0.0 <= v <= 1.0):
                raise CollageError(f"layer '{self.name}': {attr} must be in [0, 1], got {v}")
        for attr in ("attn_pos_strength", "attn_neg_strength"):
            v = getattr(self, attr)
            if not (v >= 0.0 and np.isfinite(v)):
                raise CollageError(f"layer '{self.name}': {attr} must be finite and >= 0")

    @property
    def alpha(self) -> np.ndarray:
        return self.image[:, :, 3]


@dataclass(frozen=True)
class Collage:
    """Global prompt + canvas + ordered layers, back to front."""

    prompt: str
    canvas: tuple[int, int]  # (width, height) pixels
    layers: tuple[Layer, ...]
    negative_prompt: str = ""

    def __post_init__(self):
        w, h = self.canvas
        if w <= 0 or h <= 0:
            raise CollageError(f"canvas dims must be positive, got {self.canvas}")
        object.__setattr__(self, "layers", tuple(self.layers))
        for layer in self.layers:
            s, e = layer.text_span
            if not (0 <= s <= e <= len(self.prompt)):
                raise SpanError(f"layer '{layer.name}': span {layer.text_span} outside prompt")
            if self.prompt[s:e] != layer.text:
                raise SpanError(
                    f"layer '{layer.name}': span {layer.text_span} reads "
                    f"{self.prompt[s:e]!r}, expected {layer.text!r}"
                )

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def layer_index(self, name: str) -> int:
        """1-based index of the named layer."""
        for i, layer in enumerate(self.layers, start=1):
            if layer.name == name:
                return i
        raise CollageError(f"no layer named '{name}'")

    def with_layer_params(self, params: dict[str, dict[str, float]]) -> "Collage":
        """Copy with per-layer control fields replaced (name -> field -> value)."""
        layers = tuple(
            replace(l, **params[l.name]) if l.name in params else l for l in self.layers
        )
        return replace(self, layers=layers)


@dataclass(frozen=True)
class VisibilityMap:
    """Per-cell 1-based index of the topmost covering layer; 0 where none."""

    indices: np.ndarray  # (h, w) int32

    def __post_init__(self):
        idx = np.ascontiguousarray(self.indices, dtype=np.int32)
        idx.flags.writeable = False
        object.__setattr__(self, "indices", idx)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.indices.shape  # (h, w)

    def layer_mask(self, layer_index: int) -> np.ndarray:
        return self.indices == layer_index

    def area_fraction(self, layer_index: int) -> float:
        return float(self.layer_mask(layer_index).mean())


def rasterize_layer(layer: Layer, canvas: tuple[int, int]) -> np.ndarray:
    """Place a layer's raster on the canvas: bilinear scale, integer offset.

    Returns a (H, W, 4) float64 raster; everything outside the placement has
    alpha 0. Rejects placements that land entirely off-canvas.
    """
    cw, ch = canvas
    src = layer.image
    sh, sw = src.shape[:2]
    scale = layer.placement.scale
    dw = max(1, int(round(sw * scale)))
    dh = max(1, int(round(sh * scale)))
    x0 = int(round(layer.placement.x))
    y0 = int(round(layer.placement.y))
    if x0 >= cw or y0 >= ch or x0 + dw <= 0 or y0 + dh <= 0:
        raise PlacementError(
            f"layer '{layer.name}': placement ({x0}, {y0}) size ({dw}x{dh}) "
            f"is entirely outside the {cw}x{ch} canvas"
        )
    if (dh, dw) == (sh, sw):
        resized = src
    else:
        resized = bilinear_resize(src, (dh, dw))
    out = np.zeros((ch, cw, 4), dtype=np.float64)
    sy0, sx0 = max(0, -y0), max(0, -x0)
    dy0, dx0 = max(0, y0), max(0, x0)
    spanh = min(dh - sy0, ch - dy0)
    spanw = min(dw - sx0, cw - dx0)
    out[dy0 : dy0 + spanh, dx0 : dx0 + spanw] = resized[sy0 : sy0 + spanh, sx0 : sx0 + spanw]
    return out


def flatten_composite(collage: Collage) -> np.ndarray:
    """Porter-Duff `over` of all layers, back to front, at canvas resolution.

    Returns straight (non-premultiplied) RGBA; output alpha is the combined
    coverage of the stack.
    """
    if not collage.layers:
        raise CollageError("flatten_composite needs at least one layer")
    cw, ch = collage.canvas
    rgb = np.zeros((ch, cw, 3), dtype=np.float64)  # premultiplied accumulator
    a = np.zeros((ch, cw), dtype=np.float64)
    for layer in collage.layers:
        placed = rasterize_layer(layer, collage.canvas)
        la = placed[:, :, 3:4]
        rgb = placed[:, :, :3] * la + rgb * (1.0 - la)
        a = la[:, :, 0] + a * (1.0 - la[:, :, 0])
    out = np.zeros((ch, cw, 4), dtype=np.float64)
    nz = a > 0
    out[:, :, :3][nz] = rgb[nz] / a[nz, None]
    out[:, :, 3] = a
    return out


def composite_rgb(collage: Collage, background: float = 0.0) -> np.ndarray:
    """Composite flattened onto a constant background, dropping alpha."""
    flat = flatten_composite(collage)
    a = flat[:, :, 3:4]
    return flat[:, :, :3] * a + background * (1.0 - a)


def layer_coverage(collage: Collage, resolution: tuple[int, int] | None = None) -> np.ndarray:
    """Boolean (n, h, w) stack: where each layer counts as covering.

    Full canvas resolution uses alpha > 0 exactly; lower resolutions
    area-average the placed alpha and threshold at 0.5.
    """
    cw, ch = collage.canvas
    res = (ch, cw) if resolution is None else resolution
    rh, rw = res
    if rh > ch or rw > cw:
        raise CollageError(f"resolution {res} exceeds canvas {(ch, cw)}")
    masks = np.zeros((collage.n_layers, rh, rw), dtype=bool)
    for i, layer in enumerate(collage.layers):
        alpha = rasterize_layer(layer, collage.canvas)[:, :, 3]
        if (rh, rw) == (ch, cw):
            masks[i] = alpha > 0
        else:
            masks[i] = block_mean(alpha, (rh, rw)) >= ALPHA_DOWNSAMPLE_THRESHOLD
    return masks


def compute_visibility(collage: Collage, resolution: tuple[int, int] | None = None) -> VisibilityMap:
    """Topmost covering layer per cell (1-based), 0 where nothing covers."""
    masks = layer_coverage(collage, resolution)
    n = collage.n_layers
    indices = np.zeros(masks.shape[1:], dtype=np.int32)
    for j in range(1, n + 1):  # later layers overwrite earlier ones
        indices[masks[j - 1]] = j
    return VisibilityMap(indices)


def splat_layer_values(
    collage: Collage,
    resolution: tuple[int, int],
    values: Sequence[float],
    uncovered: float,
) -> np.ndarray:
    """Per-cell value of the visible layer (shared kernel for noise levels
    and control weights): cell gets values[j-1] where layer j is visible,
    `uncovered` where no layer is."""
    if len(values) != collage.n_layers:
        raise CollageError(f"need {collage.n_layers} values, got {len(values)}")
    vis = compute_visibility(collage, resolution)
    table = np.array([uncovered, *values], dtype=np.float64)
    return table[vis.indices]


# --- project files ------------------------------------------------------------
#
# A project is a directory: collage.json manifest + PNG layer assets +
# optional .npz inverted-token blobs, all referenced by relative path.


def _layer_to_manifest(layer: Layer, image_ref: str) -> dict:
    entry = {
        "name": layer.name,
        "image": image_ref,
        "placement": {
            "x": layer.placement.x,
            "y": layer.placement.y,
            "scale": layer.placement.scale,
        },
        "text": layer.text,
        "span": [layer.text_span[0], layer.text_span[1]],
        "noise_level": layer.noise_level,
        "controlnet_weight": layer.controlnet_weight,
        "attn_pos": layer.attn_pos_strength,
        "attn_neg": layer.attn_neg_strength,
    }
    if layer.inverted_token is not None:
        entry["inverted_token"] = layer.inverted_token
    return entry


def collage_to_manifest(collage: Collage, image_refs: list[str] | None = None) -> dict:
    refs = image_refs or [f"layer_{i:02d}_{l.name}.png" for i, l in enumerate(collage.layers)]
    return {
        "version": PROJECT_VERSION,
        "prompt": collage.prompt,
        "negative_prompt": collage.negative_prompt,
        "canvas": {"w": collage.canvas[0], "h": collage.canvas[1]},
        "layers": [_layer_to_manifest(l, r) for l, r in zip(collage.layers, refs)],
    }


def save_project(collage: Collage, path: str | Path) -> Path:
    """Write the collage as a project directory; returns the manifest path."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = collage_to_manifest(collage)
    for layer, entry in zip(collage.layers, manifest["layers"]):
        Image.fromarray(to_uint8(layer.image), mode="RGBA").save(root / entry["image"])
    manifest_path = root / "collage.json"
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return manifest_path


def layer_from_manifest(entry: dict, image: np.ndarray) -> Layer:
    return Layer(
        name=entry["name"],
        image=image,
        text=entry["text"],
        text_span=(entry["span"][0], entry["span"][1]),
        placement=Placement(**entry["placement"]),
        noise_level=entry["noise_level"],
        controlnet_weight=entry["controlnet_weight"],
        attn_pos_strength=entry["attn_pos"],
        attn_neg_strength=entry["attn_neg"],
        inverted_token=entry.get("inverted_token"),
    )


def load_project(path: str | Path) -> Collage:
    """Load a project directory (or its collage.json); inverse of save_project."""
    path = Path(path)
    manifest_path = path if path.is_file() else path / "collage.json"
    if not manifest_path.exists():
        raise ProjectFormatError(f"no manifest at {manifest_path}")
    root = manifest_path.parent
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise ProjectFormatError(f"manifest is not valid JSON: {e}") from e
    return collage_from_manifest(manifest, root)


def collage_from_manifest(manifest: dict, asset_root: Path) -> Collage:
    version = manifest.get("version")
    if version != PROJECT_VERSION:
        raise ProjectFormatError(
            f"unsupported project version {version!r} (expected {PROJECT_VERSION})"
        )
    layers = []
    for entry in manifest["layers"]:
        img_path = asset_root / entry["image"]
        if not img_path.exists():
            raise ProjectFormatError(
                f"layer '{entry['name']}': missing image asset {img_path}"
            )
        with Image.open(img_path) as im:
            image = from_uint8(np.asarray(im.convert("RGBA")))
        token_ref = entry.get("inverted_token")
        if token_ref is not None and not (asset_root / token_ref).exists():
            raise ProjectFormatError(
                f"layer '{entry['name']}': missing inverted token asset {asset_root / token_ref}"
            )
        layers.append(layer_from_manifest(entry, image))
    try:
        return Collage(
            prompt=manifest["prompt"],
            negative_prompt=manifest.get("negative_prompt", ""),
            canvas=(manifest["canvas"]["w"], manifest["canvas"]["h"]),
            layers=tuple(layers),
        )
    except SpanError as e:
        raise ProjectFormatError(str(e)) from e


def validate_collage(collage: Collage, latent_stride: int | None = None) -> None:
    """Invariant checks beyond construction: on-canvas alpha, stride, coverage."""
    if latent_stride is not None:
        w, h = collage.canvas
        if w % latent_stride or h % latent_stride:
            raise CollageError(
                f"canvas {collage.canvas} is not a multiple of latent stride {latent_stride}"
            )
    for layer in collage.layers:
        placed = rasterize_layer(layer, collage.canvas)  # raises if fully off-canvas
        if not (placed[:, :, 3] > 0).any():
            raise PlacementError(f"layer '{layer.name}' has no visible pixel on canvas")


def collage_equal(a: Collage, b: Collage) -> bool:
    """Field-for-field equality, arrays compared by value."""
    if (a.prompt, a.negative_prompt, a.canvas, a.n_layers) != (
        b.prompt,
        b.negative_prompt,
        b.canvas,
        b.n_layers,
    ):
        return False
    for la, lb in zip(a.layers, b.layers):
        scalars_a = dataclasses.asdict(la)
        scalars_b = dataclasses.asdict(lb)
        img_a = scalars_a.pop("image")
        img_b = scalars_b.pop("image")
        if scalars_a != scalars_b or not np.array_equal(img_a, img_b):
            return False
    return True
