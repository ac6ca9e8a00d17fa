"""Full generation pipeline: noise the composite, denoise under control.

The baseline run (all toggles off) is plain image-space harmonization:
encode the flattened collage, add noise at the chosen start strength,
Euler-ancestral denoise, decode. Each toggle layers one mechanism on top:

    ca  biased cross-attention at every site (spatial fidelity)
    ti  learned modifier tokens spliced into the prompt (appearance)
    cn  per-layer re-weighted auxiliary control residuals (structure)
    ln  per-layer noise: blended step after every solver step

Normalized time t in [0, 1] is shared by the start strength and the
per-layer noise levels; sigma(t) is the backend's schedule.
"""

from __future__ import annotations

import hashlib
import math
from contextlib import nullcontext
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
import torch

from .attention import AttentionStrengths, build_bias, install_hooks
from .backend import BackendError, DiffusionBackend
from .control import ControlError, apply_weights, build_weight_map, canny_condition
from .inversion import InvertedToken, InversionError, inject_token
from .model import (
    Collage,
    CollageError,
    Layer,
    Placement,
    PlacementError,
    composite_rgb,
    compute_visibility,
    rasterize_layer,
)
from .noise import LatentState, NoiseImage, blended_step, build_noise_image
from .tokens import classify_tokens, encode_prompt_tokens, global_roles


class PipelineError(CollageError):
    pass


class OccludedLayerError(PipelineError):
    pass


class MissingTokenError(PipelineError):
    pass


@dataclass(frozen=True)
class AblationFlags:
    """Which control mechanisms run on top of the plain harmonization."""

    ca: bool = False
    ti: bool = False
    ln: bool = False
    cn: bool = False

    _NAMES = {
        "gh": (),
        "gh+ca": ("ca",),
        "gh+ca+ti": ("ca", "ti"),
        "gh+ca+ti+ln": ("ca", "ti", "ln"),
    }

    @classmethod
    def from_name(cls, name: str, controlnet: bool = False) -> "AblationFlags":
        if name not in cls._NAMES:
            raise PipelineError(f"unknown ablation '{name}'; one of {sorted(cls._NAMES)}")
        on = cls._NAMES[name]
        return cls(ca="ca" in on, ti="ti" in on, ln="ln" in on, cn=controlnet)

    @property
    def name(self) -> str:
        parts = ["gh"] + [f for f in ("ca", "ti", "ln") if getattr(self, f)]
        return "+".join(parts)


@dataclass(frozen=True)
class GenerationConfig:
    seed: int = 0
    start_noise: float = 0.75
    steps: int = 50
    solver: str = "euler_ancestral"
    ablation: AblationFlags = AblationFlags(ca=True, ti=True, ln=True)
    guidance_scale: float = 1.0
    negative_prompt: str = ""
    ln_blur_sigma: float = 1.0
    ln_uncovered: float = 1.0
    background_noise_level: float = 0.0  # refinement: pin the base image

    def __post_init__(self):
        if self.steps < 1:
            raise PipelineError(f"steps must be >= 1, got {self.steps}")
        if not 0.0 <= self.start_noise <= 1.0:
            raise PipelineError(f"start_noise must be in [0, 1], got {self.start_noise}")
        if self.solver != "euler_ancestral":
            raise PipelineError(f"unknown solver '{self.solver}'")


@dataclass(frozen=True)
class GenerationResult:
    image: np.ndarray  # (H, W, 3) float64 in [0, 1]
    latent: torch.Tensor
    seed: int
    sidecar: dict


def stream_seed(seed: int, label: str) -> int:
    """Stable sub-stream seed so independent draws never share a stream."""
    digest = hashlib.blake2s(f"{seed}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def euler_ancestral(
    model_fn: Callable[[torch.Tensor, float], torch.Tensor],
    x: torch.Tensor,
    sigmas: Sequence[float],
    gen: torch.Generator,
    after_step: Callable[[int, torch.Tensor, float, float], torch.Tensor] | None = None,
) -> torch.Tensor:
    """Stochastic Euler sampler over a descending sigma ladder.

    Each step splits the transition into a deterministic shrink to
    sigma_down plus fresh noise at sigma_up; the final step to sigma 0 is
    exact. `after_step` may replace the state (per-layer noise control).
    """
    for i in range(len(sigmas) - 1):
        s, s_next = sigmas[i], sigmas[i + 1]
        denoised = model_fn(x, s)
        if s_next == 0.0:
            x = denoised
        else:
            up = min(
                s_next, math.sqrt(s_next**2 * (s**2 - s_next**2) / s**2)
            )
            down = math.sqrt(s_next**2 - up**2)
            d = (x - denoised) / s
            x = x + d * (down - s)
            x = x + up * torch.randn(x.shape, generator=gen, dtype=x.dtype)
        if after_step is not None:
            x = after_step(i, x, s, s_next)
    return x


def _layer_params(collage: Collage) -> list[dict]:
    rows = []
    for layer in collage.layers:
        rows.append(
            {
                "name": layer.name,
                "noise_level": layer.noise_level,
                "controlnet_weight": layer.controlnet_weight,
                "attn_pos": layer.attn_pos_strength,
                "attn_neg": layer.attn_neg_strength,
                "inverted_token": layer.inverted_token,
            }
        )
    return rows


def _make_sidecar(backend, collage, config: GenerationConfig, flags: AblationFlags) -> dict:
    return {
        "format": "collagekit-run/1",
        "backend": getattr(backend, "config_dict", lambda: {})()
        or {"checksum": backend.checksum()[:16]},
        "prompt": collage.prompt,
        "negative_prompt": config.negative_prompt or collage.negative_prompt,
        "canvas": list(collage.canvas),
        "seed": config.seed,
        "config": {
            "start_noise": config.start_noise,
            "steps": config.steps,
            "solver": config.solver,
            "guidance_scale": config.guidance_scale,
            "ln_blur_sigma": config.ln_blur_sigma,
            "ln_uncovered": config.ln_uncovered,
            "background_noise_level": config.background_noise_level,
        },
        "ablation": {"ca": flags.ca, "ti": flags.ti, "ln": flags.ln, "cn": flags.cn},
        "layers": _layer_params(collage),
    }


def _resolve_tokens(
    collage: Collage, flags: AblationFlags, inverted_tokens: dict | None
) -> dict[int, InvertedToken]:
    """Map 1-based layer index -> learned token for every flagged layer."""
    if not flags.ti:
        return {}
    provided = inverted_tokens or {}
    out = {}
    for i, layer in enumerate(collage.layers, start=1):
        if layer.inverted_token is None and layer.name not in provided and i not in provided:
            continue
        token = provided.get(i, provided.get(layer.name))
        if token is None:
            raise MissingTokenError(
                f"layer '{layer.name}' references inverted token "
                f"'{layer.inverted_token}' but none was supplied"
            )
        out[i] = token
    return out


def _run(
    backend: DiffusionBackend,
    collage: Collage,
    config: GenerationConfig,
    flags: AblationFlags,
    inverted_tokens: dict | None = None,
    controlnet=None,
    condition: np.ndarray | None = None,
    noise_override: NoiseImage | None = None,
    progress: Callable[[int, int], None] | None = None,
) -> GenerationResult:
    # A layer with no visible pixel is a harmless no-op here (it adds nothing
    # to the composite or any mask); strict stacks can pre-check with
    # validate_collage. Off-canvas placements still fail at rasterization.
    cw, ch = collage.canvas
    if (cw, ch) != backend.canvas:
        raise PipelineError(f"collage canvas {collage.canvas} != backend canvas {backend.canvas}")
    if flags.ln:
        worst = max(l.noise_level for l in collage.layers)
        if config.start_noise < worst:
            raise PipelineError(
                f"layer-noise control needs start_noise >= max layer noise level "
                f"({config.start_noise} < {worst})"
            )

    flat_rgb = composite_rgb(collage)
    z_c = backend.encode_image(flat_rgb)
    sidecar = _make_sidecar(backend, collage, config, flags)

    if config.start_noise == 0.0:
        image = backend.decode_latent(z_c)
        if progress is not None:
            progress(config.steps, config.steps)
        return GenerationResult(image=image, latent=z_c, seed=config.seed, sidecar=sidecar)

    # Prompt encoding, with learned modifier tokens spliced in first so the
    # role map (and every bias built from it) sees the final positions.
    encoded = encode_prompt_tokens(collage, backend.tokenizer)
    tokens_by_layer = _resolve_tokens(collage, flags, inverted_tokens)
    for i in sorted(tokens_by_layer):
        width_ok = tokens_by_layer[i].embedding.shape[0] == backend.token_width
        if not width_ok:
            raise MissingTokenError(
                f"inverted token for layer {i} has width "
                f"{tokens_by_layer[i].embedding.shape[0]}, backend wants {backend.token_width}"
            )
        encoded = inject_token(encoded, tokens_by_layer[i], i, token_limit=backend.token_limit)
    cond = backend.encode_prompt(encoded)

    uncond = None
    if config.guidance_scale != 1.0:
        neg_text = config.negative_prompt or collage.negative_prompt
        neg_tokens = backend.tokenizer.tokenize(neg_text)
        uncond = backend.encode_prompt(
            type(encoded)(
                ids=tuple(t.id for t in neg_tokens),
                roles=global_roles([t.id for t in neg_tokens]),
            )
        )

    control_maps = None
    if flags.cn:
        if controlnet is None:
            raise ControlError("controlnet flag is on but no control network was supplied")
        cond_img = condition if condition is not None else canny_condition(collage)
        raw = controlnet.feature_maps(cond_img)
        weight_map = build_weight_map(collage)
        names = list(raw)
        weighted = apply_weights([raw[n] for n in names], weight_map)
        control_maps = dict(zip(names, weighted))

    hooks = None
    if flags.ca:
        resolutions = {site.resolution for site in backend.attention_sites()}
        biases = {
            res: build_bias(compute_visibility(collage, res), encoded.roles)
            for res in resolutions
        }
        strengths = AttentionStrengths(
            per_layer={
                i: (l.attn_pos_strength, l.attn_neg_strength)
                for i, l in enumerate(collage.layers, start=1)
            }
        )
        hooks = install_hooks(backend, biases, strengths)

    noise_img = None
    if flags.ln:
        noise_img = noise_override or build_noise_image(
            collage, backend.latent_shape[1:], config.ln_blur_sigma, config.ln_uncovered
        )

    times = np.linspace(config.start_noise, 0.0, config.steps + 1)
    sigmas = [backend.sigma(float(t)) for t in times]
    sampler_gen = torch.Generator().manual_seed(stream_seed(config.seed, "sampler"))
    fresh_gen = torch.Generator().manual_seed(stream_seed(config.seed, "layer-noise"))

    def model_fn(x: torch.Tensor, sigma: float) -> torch.Tensor:
        out_c = backend.denoise(x, sigma, cond, control=control_maps)
        if uncond is None:
            return out_c
        with hooks.suspended() if hooks is not None else nullcontext():
            out_u = backend.denoise(x, sigma, uncond, control=control_maps)
        return out_u + config.guidance_scale * (out_c - out_u)

    def after_step(i: int, x: torch.Tensor, s_from: float, s_to: float) -> torch.Tensor:
        if noise_img is not None:
            state = LatentState(x=x, x_c_latent=z_c, sigma=s_to, time=float(times[i + 1]))
            x = blended_step(state, noise_img, fresh_gen, mask_time=float(times[i])).x
        if progress is not None:
            progress(i + 1, config.steps)
        return x

    try:
        x = z_c + sigmas[0] * torch.randn(
            backend.latent_shape, generator=sampler_gen, dtype=z_c.dtype
        )
        x = euler_ancestral(model_fn, x, sigmas, sampler_gen, after_step)
    except Exception as e:
        if isinstance(e, CollageError):
            raise
        raise BackendError(f"generation failed (seed {config.seed}): {e}") from e
    finally:
        if hooks is not None:
            hooks.uninstall()

    return GenerationResult(
        image=backend.decode_latent(x), latent=x.detach(), seed=config.seed, sidecar=sidecar
    )


def sdedit_harmonize(
    backend: DiffusionBackend,
    collage: Collage,
    config: GenerationConfig,
    progress: Callable[[int, int], None] | None = None,
) -> GenerationResult:
    """Plain global harmonization: every per-layer mechanism off."""
    return _run(backend, collage, config, AblationFlags(), progress=progress)


def harmonize(
    backend: DiffusionBackend,
    collage: Collage,
    config: GenerationConfig,
    inverted_tokens: dict | None = None,
    controlnet=None,
    condition: np.ndarray | None = None,
    progress: Callable[[int, int], None] | None = None,
) -> GenerationResult:
    """Layer-conditioned harmonization with the config's toggles."""
    return _run(
        backend,
        collage,
        config,
        config.ablation,
        inverted_tokens=inverted_tokens,
        controlnet=controlnet,
        condition=condition,
        progress=progress,
    )


def refine_layer(
    backend: DiffusionBackend,
    collage: Collage,
    base_image: np.ndarray,
    layer_name: str,
    config: GenerationConfig,
    inverted_tokens: dict | None = None,
    controlnet=None,
    progress: Callable[[int, int], None] | None = None,
) -> GenerationResult:
    """Re-generate one object of an already generated image.

    Builds a two-layer stack: the picked image as a pinned background
    (noise level = config.background_noise_level, normally 0) and the
    chosen layer in front, then runs with per-layer noise forced on. The
    background region survives up to the codec round-trip.
    """
    base = np.asarray(base_image, dtype=np.float64)
    ch, cw = base.shape[:2]
    if (cw, ch) != tuple(collage.canvas):
        raise PipelineError(f"base image {cw}x{ch} does not match canvas {collage.canvas}")
    if base.ndim != 3 or base.shape[2] not in (3, 4):
        raise PipelineError(f"base image must be RGB(A), got shape {base.shape}")
    rgba = np.ones((ch, cw, 4), dtype=np.float64)
    rgba[:, :, : base.shape[2]] = base

    idx = collage.layer_index(layer_name)
    fg = collage.layers[idx - 1]
    placed_alpha = rasterize_layer(fg, collage.canvas)[:, :, 3]
    if not (placed_alpha > 0).any():
        raise OccludedLayerError(
            f"refine layer '{layer_name}' is not visible anywhere on the canvas"
        )

    background = Layer(
        name="__base__",
        image=rgba,
        text="",
        text_span=(0, 0),
        placement=Placement(),
        noise_level=config.background_noise_level,
        controlnet_weight=0.0,
        attn_pos_strength=0.0,
        attn_neg_strength=0.0,
    )
    two_layer = Collage(
        prompt=collage.prompt,
        negative_prompt=collage.negative_prompt,
        canvas=collage.canvas,
        layers=(background, fg),
    )
    flags = replace(config.ablation, ln=True)
    tokens = None
    if inverted_tokens:
        if fg.name in inverted_tokens:
            tokens = {2: inverted_tokens[fg.name]}
        elif idx in inverted_tokens:
            tokens = {2: inverted_tokens[idx]}
    return _run(
        backend,
        two_layer,
        config,
        flags,
        inverted_tokens=tokens,
        controlnet=controlnet,
        progress=progress,
    )


def generate_gallery(
    backend: DiffusionBackend,
    collage: Collage,
    config: GenerationConfig,
    seeds: Sequence[int],
    **kwargs,
) -> list[GenerationResult]:
    """One harmonization per seed, identical config otherwise."""
    return [harmonize(backend, collage, replace(config, seed=int(s)), **kwargs) for s in seeds]


def config_from_sidecar(sidecar: dict) -> GenerationConfig:
    """Rebuild the generation config a sidecar records."""
    c = sidecar["config"]
    a = sidecar["ablation"]
    return GenerationConfig(
        seed=sidecar["seed"],
        start_noise=c["start_noise"],
        steps=c["steps"],
        solver=c["solver"],
        guidance_scale=c["guidance_scale"],
        negative_prompt=sidecar.get("negative_prompt", ""),
        ln_blur_sigma=c["ln_blur_sigma"],
        ln_uncovered=c["ln_uncovered"],
        background_noise_level=c.get("background_noise_level", 0.0),
        ablation=AblationFlags(ca=a["ca"], ti=a["ti"], ln=a["ln"], cn=a["cn"]),
    )


def replay(
    backend: DiffusionBackend,
    collage: Collage,
    sidecar: dict,
    **assets,
) -> GenerationResult:
    """Re-run a recorded generation; same backend + sidecar = same bytes."""
    recorded = sidecar.get("backend", {}).get("checksum")
    if recorded is not None and backend.checksum()[:16] != recorded:
        raise PipelineError(
            f"sidecar was produced by backend {recorded}, this one is "
            f"{backend.checksum()[:16]}"
        )
    return harmonize(backend, collage, config_from_sidecar(sidecar), **assets)
