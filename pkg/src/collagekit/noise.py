"""Per-layer noise control: region-wise harmonization strength.

Each layer's noise level t_i is splatted into a latent-resolution image h via
the visibility rule and blurred to soften region seams. During sampling, a
cell is released for free denoising once the (normalized) time drops to its
h value; until then it is pinned to the freshly re-noised composite:

    x'(t-1) = x(t-1)          where m(t) = 1   (t <= h)
              x_c + sigma(t-1) * eps  elsewhere

The selection is done with `where` on a binary mask, which keeps released
cells bit-identical to the raw solver output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .imageops import gaussian_blur
from .model import Collage, CollageError, splat_layer_values


class NoiseControlError(CollageError):
    pass


@dataclass(frozen=True)
class NoiseImage:
    """Latent-resolution map of per-cell noise levels, post-blur."""

    h: np.ndarray  # (H, W) float64 in [0, 1]
    blur_sigma_px: float

    def __post_init__(self):
        arr = np.ascontiguousarray(self.h, dtype=np.float64)
        if arr.min() < 0 or arr.max() > 1:
            raise NoiseControlError("noise image values must stay in [0, 1]")
        arr.flags.writeable = False
        object.__setattr__(self, "h", arr)


@dataclass(frozen=True)
class BlendMask:
    """Binary release mask at one solver time: 1 = denoise freely."""

    m: np.ndarray  # (H, W) uint8 {0, 1}
    time: float

    def __post_init__(self):
        arr = np.ascontiguousarray(self.m, dtype=np.uint8)
        arr.flags.writeable = False
        object.__setattr__(self, "m", arr)

    def all_ones(self) -> bool:
        return bool(self.m.all())


@dataclass(frozen=True)
class LatentState:
    """Solver state: current latent, encoded composite, noise level, time."""

    x: torch.Tensor
    x_c_latent: torch.Tensor
    sigma: float
    time: float

    def __post_init__(self):
        if self.x.shape != self.x_c_latent.shape:
            raise NoiseControlError(
                f"latent {tuple(self.x.shape)} vs composite {tuple(self.x_c_latent.shape)}"
            )
        if self.sigma < 0:
            raise NoiseControlError(f"sigma must be >= 0, got {self.sigma}")


def build_noise_image(
    collage: Collage,
    latent_res: tuple[int, int],
    blur_sigma_px: float = 1.0,
    uncovered: float = 1.0,
) -> NoiseImage:
    """Splat per-layer noise levels through the visibility map, then blur.

    Cells no layer covers get `uncovered` (default 1.0: nothing there to
    preserve, so they are always released).
    """
    h = splat_layer_values(
        collage, latent_res, [l.noise_level for l in collage.layers], uncovered
    )
    return NoiseImage(h=gaussian_blur(h, blur_sigma_px), blur_sigma_px=blur_sigma_px)


def blend_mask(noise_img: NoiseImage, t: float) -> BlendMask:
    """Release mask at time t: m = 1 iff t <= h (region free to denoise)."""
    if not 0.0 <= t <= 1.0:
        raise NoiseControlError(f"time must be in [0, 1], got {t}")
    return BlendMask(m=(t <= noise_img.h).astype(np.uint8), time=t)


def blended_step(
    solver_out: LatentState,
    noise_img: NoiseImage,
    rng: torch.Generator,
    mask_time: float,
) -> LatentState:
    """Pin not-yet-released cells back to the re-noised composite.

    `solver_out` is the state after a solver step landed at time t-1;
    `mask_time` is the time stepped from, which decides what is released.
    The composite is re-noised at the state's own sigma(t-1), drawn from the
    job's dedicated stream so the sampler's noise is untouched.
    """
    mask = blend_mask(noise_img, mask_time)
    if mask.all_ones():
        return solver_out
    x = solver_out.x
    if mask.m.shape != x.shape[-2:]:
        raise NoiseControlError(
            f"mask {mask.m.shape} does not match latent spatial dims {tuple(x.shape[-2:])}"
        )
    pinned = solver_out.x_c_latent
    if solver_out.sigma > 0:
        eps = torch.randn(x.shape, generator=rng, dtype=x.dtype, device=x.device)
        pinned = pinned + solver_out.sigma * eps
    keep = torch.as_tensor(mask.m.copy(), device=x.device, dtype=torch.bool)
    blended = torch.where(keep, x, pinned)
    return LatentState(
        x=blended, x_c_latent=solver_out.x_c_latent, sigma=solver_out.sigma, time=solver_out.time
    )
