"""Per-layer structure-preservation weights for an auxiliary control network.

The scalar strength of standard ControlNet-style conditioning is replaced by
a weight map built with the same visibility kernel as the noise image: each
cell carries the control weight of its visible layer (0 where uncovered).
The map is bilinearly resized to each feature map's spatial dims and
multiplied in, broadcasting over channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
import torch

from .imageops import bilinear_resize, to_uint8
from .model import Collage, CollageError, composite_rgb, splat_layer_values


class ControlError(CollageError):
    pass


@dataclass(frozen=True)
class ControlWeightMap:
    """Canvas-resolution weight map with a per-resolution resize cache."""

    w: np.ndarray  # (H, W) float64 in [0, 1]

    def __post_init__(self):
        arr = np.ascontiguousarray(self.w, dtype=np.float64)
        if arr.min() < 0 or arr.max() > 1:
            raise ControlError("control weights must lie in [0, 1]")
        arr.flags.writeable = False
        object.__setattr__(self, "w", arr)
        object.__setattr__(self, "_cache", {})

    def resized(self, hw: tuple[int, int]) -> np.ndarray:
        cached = self._cache.get(hw)
        if cached is None:
            cached = bilinear_resize(self.w, hw)
            cached.flags.writeable = False
            self._cache[hw] = cached
        return cached


def build_weight_map(collage: Collage) -> ControlWeightMap:
    """Visible layer's control weight per canvas pixel; uncovered cells 0."""
    cw, ch = collage.canvas
    w = splat_layer_values(
        collage, (ch, cw), [l.controlnet_weight for l in collage.layers], uncovered=0.0
    )
    return ControlWeightMap(w=w)


def apply_weights(
    feature_maps: list[torch.Tensor], weight_map: ControlWeightMap
) -> list[torch.Tensor]:
    """Re-weight (c, h, w) feature maps by the resized map, per spatial cell."""
    out = []
    for m in feature_maps:
        if m.ndim != 3:
            raise ControlError(f"feature map must be (c, h, w), got {tuple(m.shape)}")
        scale = torch.as_tensor(
            weight_map.resized(tuple(m.shape[-2:])).copy(), dtype=m.dtype, device=m.device
        )
        out.append(m * scale[None])
    return out


def apply_scalar_weight(feature_maps: list[torch.Tensor], strength: float) -> list[torch.Tensor]:
    """Classic scalar-strength conditioning; the map path must reproduce this
    exactly when every layer shares the same weight."""
    if not 0.0 <= strength <= 1.0:
        raise ControlError(f"strength must be in [0, 1], got {strength}")
    return [m * strength for m in feature_maps]


def canny_condition(collage: Collage, low: int = 100, high: int = 200) -> np.ndarray:
    """Default condition modality: canny edges of the flattened composite."""
    rgb = to_uint8(composite_rgb(collage))
    gray = cv2.cvtColor(rgb, cv2.COLOR_RGB2GRAY)
    edges = cv2.Canny(gray, low, high)
    return edges.astype(np.float64) / 255.0
