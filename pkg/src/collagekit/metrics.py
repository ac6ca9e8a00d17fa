"""Per-layer fidelity metrics and report aggregation.

Spatial fidelity: cosine similarity between a layer text's embedding and
the embedding of the generated image masked to that layer's visible region
(multiplied by the mask over black, not cropped). Appearance fidelity: the
same, but against the layer's own placed raster. The embedding model is
pluggable; tests use a deterministic mock, real evaluation pins a
vision-language checkpoint by identifier.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .model import Collage, CollageError, VisibilityMap, compute_visibility, rasterize_layer
from .imageops import bilinear_resize


class MetricsError(CollageError):
    pass


class SeedCountMismatchError(MetricsError):
    pass


class EmbeddingModel(Protocol):
    def embed_text(self, text: str) -> np.ndarray: ...
    def embed_image(self, image: np.ndarray) -> np.ndarray: ...


class MockEmbedder:
    """Deterministic stand-in embedder: hashed text vectors, random-projected
    downsampled pixels for images. Unit-norm outputs."""

    def __init__(self, seed: int = 0, dim: int = 32, patch: int = 8):
        self.dim = dim
        self.patch = patch
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal((dim, patch * patch * 3))

    def embed_text(self, text: str) -> np.ndarray:
        digest = hashlib.blake2s(text.encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim == 2:
            img = np.repeat(img[:, :, None], 3, axis=2)
        small = bilinear_resize(img[:, :, :3], (self.patch, self.patch))
        v = self._proj @ small.reshape(-1)
        n = np.linalg.norm(v)
        if n == 0:
            v = self._proj @ np.full(self.patch * self.patch * 3, 1e-9)
            n = np.linalg.norm(v)
        return v / n


class ClipEmbedder:
    """CLIP-backed embedder, pinned by checkpoint identifier.

    Requires the `transformers` package and locally available weights; only
    constructed when real evaluation is configured.
    """

    def __init__(self, identifier: str = "openai/clip-vit-base-patch32"):
        try:
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as e:
            raise MetricsError("transformers is required for ClipEmbedder") from e
        self.identifier = identifier
        self.model = CLIPModel.from_pretrained(identifier)
        self.processor = CLIPProcessor.from_pretrained(identifier)
        self.model.eval()

    def embed_text(self, text: str) -> np.ndarray:
        import torch

        with torch.no_grad():
            inputs = self.processor(text=[text], return_tensors="pt", padding=True)
            v = self.model.get_text_features(**inputs)[0].numpy()
        return v / np.linalg.norm(v)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        import torch
        from PIL import Image

        arr = np.clip(np.asarray(image) * 255.0, 0, 255).astype(np.uint8)
        with torch.no_grad():
            inputs = self.processor(images=Image.fromarray(arr), return_tensors="pt")
            v = self.model.get_image_features(**inputs)[0].numpy()
        return v / np.linalg.norm(v)


@dataclass(frozen=True)
class MaskedRegion:
    image: np.ndarray  # zeroed outside the layer's visible cells
    present: bool  # False when the layer is fully occluded / off-map


def masked_region(
    image: np.ndarray, visibility: VisibilityMap, layer_index: int
) -> MaskedRegion:
    """Zero the image outside the cells this layer is visible in."""
    img = np.asarray(image, dtype=np.float64)
    mask = visibility.layer_mask(layer_index)
    if mask.shape != img.shape[:2]:
        raise MetricsError(
            f"visibility {mask.shape} does not match image {img.shape[:2]}"
        )
    out = img * mask[:, :, None]
    return MaskedRegion(image=out, present=bool(mask.any()))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.clip(np.dot(a, b), -1.0, 1.0))


def spatial_fidelity(embedder: EmbeddingModel, layer_text: str, masked: np.ndarray) -> float:
    """Text-to-region similarity in [-1, 1]."""
    return cosine(embedder.embed_text(layer_text), embedder.embed_image(masked))


def appearance_fidelity(
    embedder: EmbeddingModel, layer_image: np.ndarray, masked: np.ndarray
) -> float:
    """Region-to-source-layer similarity in [-1, 1]."""
    return cosine(embedder.embed_image(layer_image), embedder.embed_image(masked))


def _placed_rgb(collage: Collage, layer_index: int) -> np.ndarray:
    placed = rasterize_layer(collage.layers[layer_index - 1], collage.canvas)
    return placed[:, :, :3] * placed[:, :, 3:4]


@dataclass(frozen=True)
class Report:
    """Per-layer and per-method fidelity table."""

    rows: tuple  # dicts: method, layer, spatial, appearance, n_seeds
    summary: dict  # method -> {"spatial": float, "appearance": float}

    def to_json(self) -> str:
        layers: dict = {}
        for row in self.rows:
            layers.setdefault(row["method"], {})[row["layer"]] = {
                "spatial_fidelity": row["spatial"],
                "appearance_fidelity": row["appearance"],
                "n_seeds": row["n_seeds"],
            }
        return json.dumps({"summary": self.summary, "per_layer": layers}, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["method", "layer", "spatial_fidelity", "appearance_fidelity", "n_seeds"])
        for row in self.rows:
            writer.writerow(
                [
                    row["method"],
                    row["layer"],
                    "" if row["spatial"] is None else f"{row['spatial']:.6f}",
                    "" if row["appearance"] is None else f"{row['appearance']:.6f}",
                    row["n_seeds"],
                ]
            )
        for method, agg in self.summary.items():
            writer.writerow(
                [method, "(all)", f"{agg['spatial']:.6f}", f"{agg['appearance']:.6f}", ""]
            )
        return buf.getvalue()


def report(
    collage: Collage,
    galleries: dict[str, Sequence[np.ndarray]],
    embedder: EmbeddingModel,
) -> Report:
    """Average per-layer fidelity over seeds for each method's gallery.

    Galleries must be aligned by seed (same length). Fully occluded layers
    are reported absent rather than scored.
    """
    lengths = {m: len(g) for m, g in galleries.items()}
    if len(set(lengths.values())) > 1:
        raise SeedCountMismatchError(f"galleries differ in seed count: {lengths}")
    vis = compute_visibility(collage)
    rows = []
    summary = {}
    for method, gallery in galleries.items():
        per_metric_all: dict[str, list[float]] = {"spatial": [], "appearance": []}
        for li, layer in enumerate(collage.layers, start=1):
            source = _placed_rgb(collage, li)
            spatials, appearances = [], []
            for img in gallery:
                region = masked_region(np.asarray(img)[:, :, :3], vis, li)
                if not region.present:
                    continue
                spatials.append(spatial_fidelity(embedder, layer.text, region.image))
                appearances.append(appearance_fidelity(embedder, source, region.image))
            rows.append(
                {
                    "method": method,
                    "layer": layer.name,
                    "spatial": float(np.mean(spatials)) if spatials else None,
                    "appearance": float(np.mean(appearances)) if appearances else None,
                    "n_seeds": len(spatials),
                }
            )
            per_metric_all["spatial"].extend(spatials)
            per_metric_all["appearance"].extend(appearances)
        summary[method] = {
            "spatial": float(np.mean(per_metric_all["spatial"])) if per_metric_all["spatial"] else None,
            "appearance": float(np.mean(per_metric_all["appearance"])) if per_metric_all["appearance"] else None,
        }
    return Report(rows=tuple(rows), summary=summary)


def published_similarity_table() -> dict:
    """Published average similarities for the four-method ladder; the
    optional real-checkpoint trend test compares orderings against these."""
    return {
        "gh": {"spatial": 0.215, "appearance": 0.846},
        "gh+ca": {"spatial": 0.236, "appearance": 0.867},
        "gh+ca+ti": {"spatial": 0.233, "appearance": 0.877},
        "gh+ca+ti+ln": {"spatial": 0.238, "appearance": 0.893},
    }


def export_rubric(collage: Collage) -> dict:
    """Blank human-scoring form: one global quality item, plus per-layer
    position and appearance items. Scoring itself is out of scope."""
    return {
        "format": "collagekit-rubric/1",
        "prompt": collage.prompt,
        "image_quality": {
            "question": "Is the image high quality and globally coherent?",
            "scale": [0, 1],
            "score": None,
        },
        "spatial_fidelity": [
            {
                "layer": l.name,
                "question": f"Is '{l.text}' generated in the layer's position?",
                "scale": [0, 1],
                "score": None,
            }
            for l in collage.layers
        ],
        "appearance_fidelity": [
            {
                "layer": l.name,
                "question": "Score each visual attribute's match to the source layer",
                "attributes": [],  # evaluator lists attributes, scores each 0.0-1.0
                "scale": [0.0, 1.0],
            }
            for l in collage.layers
        ],
    }
