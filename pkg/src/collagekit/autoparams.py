"""Heuristic per-layer parameter initialization.

Depth drives the harmonization-vs-structure tradeoff: front layers get less
noise (preserve the subject) and stronger structure-preservation weight;
back layers the opposite. Attention strengths start at a base value and get
boosted for layers that are front-half by rank or small by visible area,
since those tend to vanish without a push.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import Collage, CollageError, compute_visibility


@dataclass(frozen=True)
class AutoParamBounds:
    noise: tuple[float, float] = (0.55, 0.85)  # (front/lo, back/hi)
    controlnet: tuple[float, float] = (0.2, 1.0)  # (back/lo, front/hi)
    attn_base: float = 1.0
    attn_boost: float = 1.5
    small_threshold: float = 0.10  # fraction of canvas cells

    def __post_init__(self):
        for name in ("noise", "controlnet"):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo <= hi <= 1.0:
                raise CollageError(f"{name} bounds must satisfy 0 <= lo <= hi <= 1")


def auto_params(
    collage: Collage, bounds: AutoParamBounds = AutoParamBounds()
) -> dict[str, dict[str, float]]:
    """Suggested per-layer controls, keyed by layer name.

    Rank runs 0 (backmost) to 1 (frontmost); a single layer sits at 0.5, so
    interpolated values land mid-range. Results always stay within bounds.
    """
    if not collage.layers:
        raise CollageError("auto_params needs at least one layer")
    n = collage.n_layers
    vis = compute_visibility(collage)
    noise_lo, noise_hi = bounds.noise
    cn_lo, cn_hi = bounds.controlnet
    out: dict[str, dict[str, float]] = {}
    for i, layer in enumerate(collage.layers):
        rank = i / (n - 1) if n > 1 else 0.5
        small = vis.area_fraction(i + 1) < bounds.small_threshold
        boosted = (n > 1 and rank > 0.5) or small
        attn = bounds.attn_base * bounds.attn_boost if boosted else bounds.attn_base
        out[layer.name] = {
            "noise_level": noise_hi + rank * (noise_lo - noise_hi),
            "controlnet_weight": cn_lo + rank * (cn_hi - cn_lo),
            "attn_pos_strength": attn,
            "attn_neg_strength": attn,
        }
    return out
