"""Per-layer modifier-token learning and prompt injection.

Each layer can learn one extra token embedding: optimize the embedding so
the denoiser, prompted with "<token> <layer text>", reconstructs the
partial composite (layers up to and including this one) inside the layer's
alpha support. Everything else in the model stays frozen. The learned
vector is later spliced into the full prompt right before the layer's
tokens and classifies as that layer's token.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .backend import DiffusionBackend, TokenLimitError
from .imageops import block_mean
from .model import Collage, CollageError, flatten_composite, rasterize_layer
from .tokens import EncodedPrompt, TokenRoleMap, global_roles


class InversionError(CollageError):
    pass


class InversionDivergedError(InversionError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss at optimization step {step} (loss={loss})")
        self.step = step


@dataclass(frozen=True)
class InvertedToken:
    """A learned modifier embedding plus provenance for compatibility checks."""

    layer_name: str
    embedding: np.ndarray  # (token_width,) float64
    steps_trained: int
    final_loss: float
    backend_id: str

    def __post_init__(self):
        emb = np.ascontiguousarray(self.embedding, dtype=np.float64)
        if emb.ndim != 1 or not np.isfinite(emb).all():
            raise InversionError("embedding must be a finite 1-D vector")
        emb.flags.writeable = False
        object.__setattr__(self, "embedding", emb)
        if self.steps_trained < 0:
            raise InversionError("steps_trained must be >= 0")


@dataclass(frozen=True)
class InversionConfig:
    steps: int = 500
    lr: float = 5e-3
    seed: int = 0
    init_word: str = "nice"  # semantically weak adjective


def save_token(token: InvertedToken, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "wb") as f:
        np.savez(
            f,
            embedding=token.embedding,
            layer_name=token.layer_name,
            steps_trained=token.steps_trained,
            final_loss=token.final_loss,
            backend_id=token.backend_id,
            width=token.embedding.shape[0],
        )
    return path


def load_token(path: str | Path) -> InvertedToken:
    with np.load(path, allow_pickle=False) as blob:
        return InvertedToken(
            layer_name=str(blob["layer_name"]),
            embedding=blob["embedding"],
            steps_trained=int(blob["steps_trained"]),
            final_loss=float(blob["final_loss"]),
            backend_id=str(blob["backend_id"]),
        )


def build_inversion_target(collage: Collage, layer_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Training target for layer i: composite of layers 1..i plus i's alpha.

    Returns (target RGBA at canvas resolution, mask = placed alpha of layer i).
    """
    if not 1 <= layer_index <= collage.n_layers:
        raise InversionError(f"layer index {layer_index} out of range 1..{collage.n_layers}")
    partial = replace(collage, layers=collage.layers[:layer_index])
    target = flatten_composite(partial)
    mask = rasterize_layer(collage.layers[layer_index - 1], collage.canvas)[:, :, 3]
    return target, mask


def _layer_prompt(backend: DiffusionBackend, text: str, embedding: torch.Tensor) -> EncodedPrompt:
    """"<modifier> <layer text>" with the modifier as a live tensor slot."""
    tokens = backend.tokenizer.tokenize(text)
    ids: list[int | None] = [tokens[0].id, None] + [t.id for t in tokens[1:]]
    return EncodedPrompt(ids=tuple(ids), roles=global_roles(ids), vectors={1: embedding})


def invert_layer(
    backend: DiffusionBackend,
    collage: Collage,
    layer_index: int,
    config: InversionConfig = InversionConfig(),
    on_step: Callable[[int, float], None] | None = None,
) -> InvertedToken:
    """Optimize one modifier embedding against the masked denoising loss.

    The loss lives in latent space: the placed alpha is area-averaged down to
    latent resolution, so cells fully outside the layer's support have exact
    zero weight. One noise draw per step estimates the expectation; Adagrad
    keeps the steps adaptive without momentum.
    """
    layer = collage.layers[layer_index - 1]
    target_rgba, mask = build_inversion_target(collage, layer_index)
    target_rgb = target_rgba[:, :, :3] * target_rgba[:, :, 3:4]
    z_target = backend.encode_image(target_rgb)
    mask_latent = torch.as_tensor(block_mean(mask, backend.latent_shape[1:]))

    emb = backend.token_embedding(backend.tokenizer.word_id(config.init_word))
    emb = emb.clone().requires_grad_(True)
    encoded = _layer_prompt(backend, layer.text, emb)
    optimizer = torch.optim.Adagrad([emb], lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)

    final_loss = 0.0
    for step in range(config.steps):
        sigma = backend.sample_training_sigma(gen)
        eps = torch.randn(backend.latent_shape, generator=gen, dtype=z_target.dtype)
        cond = backend.encode_prompt(encoded)
        pred = backend.denoise(z_target + sigma * eps, sigma, cond)
        residual = mask_latent[None] * (z_target - pred)
        loss = (residual**2).mean()
        final_loss = float(loss.detach())
        if not np.isfinite(final_loss):
            raise InversionDivergedError(step, final_loss)
        if on_step is not None:
            on_step(step, final_loss)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

    return InvertedToken(
        layer_name=layer.name,
        embedding=emb.detach().numpy().copy(),
        steps_trained=config.steps,
        final_loss=final_loss,
        backend_id=backend.checksum()[:16],
    )


def masked_loss(
    backend: DiffusionBackend,
    z_target: torch.Tensor,
    mask_latent: torch.Tensor,
    noised: torch.Tensor,
    sigma: float,
    cond: torch.Tensor,
    pred_offset: torch.Tensor | None = None,
) -> float:
    """One evaluation of the inversion objective; `pred_offset` perturbs the
    denoiser output (finite-difference probes of the loss's locality)."""
    pred = backend.denoise(noised, sigma, cond)
    if pred_offset is not None:
        pred = pred + pred_offset
    residual = mask_latent[None] * (z_target - pred)
    return float((residual**2).mean())


def inject_token(
    encoded: EncodedPrompt,
    token: InvertedToken,
    layer_index: int,
    token_limit: int | None = None,
) -> EncodedPrompt:
    """Splice a learned embedding right before its layer's first token.

    The new position classifies as that layer's token; every later position
    (and any previously injected vector there) shifts by one.
    """
    positions = encoded.roles.layer_token_positions(layer_index)
    if positions.size == 0:
        raise InversionError(f"layer {layer_index} has no tokens in the encoded prompt")
    at = int(positions[0])
    if token_limit is not None and encoded.length + 1 > token_limit:
        raise TokenLimitError(
            f"injection would make the prompt {encoded.length + 1} tokens, limit {token_limit}"
        )
    ids = encoded.ids[:at] + (None,) + encoded.ids[at:]
    roles = np.insert(encoded.roles.roles, at, layer_index)
    vectors = {(p + 1 if p >= at else p): v for p, v in encoded.vectors.items()}
    vectors[at] = torch.as_tensor(token.embedding.copy())
    return EncodedPrompt(ids=ids, roles=TokenRoleMap(roles), vectors=vectors)


def remove_token(encoded: EncodedPrompt, position: int) -> EncodedPrompt:
    """Inverse of inject_token for a vector position."""
    if encoded.ids[position] is not None or position not in encoded.vectors:
        raise InversionError(f"position {position} is not an injected vector")
    ids = encoded.ids[:position] + encoded.ids[position + 1 :]
    roles = np.delete(encoded.roles.roles, position)
    vectors = {
        (p - 1 if p > position else p): v
        for p, v in encoded.vectors.items()
        if p != position
    }
    return EncodedPrompt(ids=ids, roles=TokenRoleMap(roles), vectors=vectors)
