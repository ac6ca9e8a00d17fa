"""Cross-attention biasing: steer layer tokens toward their visible regions.

For every attention resolution we build a positive map (token j should
attend to cells its layer covers) and a negative map (token j must not leak
elsewhere), then shift the attention logits before the softmax:

    softmax((Q K^T + w_pos * A_pos - w_neg * A_neg) / sqrt(d)) V

with w = v * log(1 + log(1 + sigma)) * max(Q K^T), so the push fades as the
sample denoises. Global-token columns are all zero in both maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .model import VisibilityMap
from .tokens import GLOBAL, TokenRoleMap


class AttentionError(Exception):
    pass


class MissingBiasError(AttentionError):
    """An attention site has a resolution no bias was built for."""


@dataclass(frozen=True)
class AttentionBias:
    """Paired {0,1} bias maps for one attention resolution."""

    a_pos: np.ndarray  # (N_v, N_t)
    a_neg: np.ndarray  # (N_v, N_t)
    resolution: tuple[int, int]
    token_layers: np.ndarray  # (N_t,) int32; 0 = global column

    def __post_init__(self):
        for name in ("a_pos", "a_neg", "token_layers"):
            arr = np.ascontiguousarray(getattr(self, name))
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        h, w = self.resolution
        if self.a_pos.shape != self.a_neg.shape or self.a_pos.shape[0] != h * w:
            raise AttentionError(
                f"bias shapes {self.a_pos.shape}/{self.a_neg.shape} do not match "
                f"resolution {self.resolution}"
            )

    @property
    def n_tokens(self) -> int:
        return int(self.a_pos.shape[1])


@dataclass(frozen=True)
class AttentionStrengths:
    """User-set push/pull scalars, with optional per-layer overrides."""

    v_pos: float = 1.0
    v_neg: float = 1.0
    per_layer: dict = field(default_factory=dict)  # layer index -> (v_pos, v_neg)

    def __post_init__(self):
        values = [self.v_pos, self.v_neg]
        for pair in self.per_layer.values():
            values.extend(pair)
        if any(not (v >= 0 and math.isfinite(v)) for v in values):
            raise AttentionError("attention strengths must be finite and >= 0")

    def column_strengths(self, token_layers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-token (pos, neg) strength vectors; global columns get 0."""
        pos = np.zeros(token_layers.shape[0], dtype=np.float64)
        neg = np.zeros(token_layers.shape[0], dtype=np.float64)
        for j, layer in enumerate(token_layers):
            if layer == GLOBAL:
                continue
            vp, vn = self.per_layer.get(int(layer), (self.v_pos, self.v_neg))
            pos[j], neg[j] = vp, vn
        return pos, neg


def build_bias(visibility: VisibilityMap, roles: TokenRoleMap) -> AttentionBias:
    """Bias maps from a visibility map at the site's resolution.

    For a token of layer L: positive where the cell's visible layer is L,
    negative everywhere else (including uncovered cells).
    """
    vis_flat = visibility.indices.reshape(-1)  # (N_v,)
    token_layers = roles.roles
    n_v, n_t = vis_flat.shape[0], roles.token_count
    a_pos = np.zeros((n_v, n_t), dtype=np.float64)
    a_neg = np.zeros((n_v, n_t), dtype=np.float64)
    for j, layer in enumerate(token_layers):
        if layer == GLOBAL:
            continue
        owned = vis_flat == layer
        a_pos[owned, j] = 1.0
        a_neg[~owned, j] = 1.0
    return AttentionBias(
        a_pos=a_pos,
        a_neg=a_neg,
        resolution=visibility.resolution,
        token_layers=token_layers.copy(),
    )


def schedule_weight(v: float, sigma: float, qk_max: float) -> float:
    """Noise-dependent bias weight: v * log(1 + log(1 + sigma)) * qk_max."""
    if sigma < 0:
        raise AttentionError(f"sigma must be >= 0, got {sigma}")
    return v * math.log1p(math.log1p(sigma)) * qk_max


def plain_cross_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Unbiased softmax(QK^T / sqrt(d)) V; leading dims are heads/batch."""
    d = q.shape[-1]
    logits = (q @ k.transpose(-2, -1)) / math.sqrt(d)
    return torch.softmax(logits, dim=-1) @ v


def biased_cross_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    bias: AttentionBias,
    strengths: AttentionStrengths,
    sigma: float,
) -> torch.Tensor:
    """Cross-attention with the positive/negative logit shift.

    q: (..., N_v, d), k: (..., N_t, d), v: (..., N_t, d_v). The weight is
    recomputed per leading index (per head) from that slice's max(QK^T).
    Zero strengths or sigma = 0 take the exact unbiased code path.
    """
    for name, t in (("q", q), ("k", k), ("v", v)):
        if not torch.isfinite(t).all():
            raise AttentionError(f"non-finite values in {name}")
    if k.shape[-2] != bias.n_tokens:
        raise AttentionError(
            f"key length {k.shape[-2]} != bias token count {bias.n_tokens}"
        )
    decay = math.log1p(math.log1p(sigma)) if sigma >= 0 else None
    if decay is None:
        raise AttentionError(f"sigma must be >= 0, got {sigma}")
    pos_cols, neg_cols = strengths.column_strengths(bias.token_layers)
    if decay == 0.0 or (not pos_cols.any() and not neg_cols.any()):
        return plain_cross_attention(q, k, v)

    dt, dev = q.dtype, q.device
    base = torch.as_tensor(
        bias.a_pos * pos_cols[None, :] - bias.a_neg * neg_cols[None, :],
        dtype=dt,
        device=dev,
    )
    d = q.shape[-1]
    qk = q @ k.transpose(-2, -1)
    qk_max = qk.amax(dim=(-2, -1), keepdim=True)
    logits = (qk + decay * qk_max * base) / math.sqrt(d)
    return torch.softmax(logits, dim=-1) @ v


class AttentionHooks:
    """Revocable installation of biased attention on a backend.

    While installed (and not suspended), every cross-attention site routes
    through `biased_cross_attention` with the bias matching its resolution.
    Uninstalling restores whatever override was present before.
    """

    def __init__(self, backend, bias_per_resolution, strengths: AttentionStrengths):
        self._backend = backend
        self._biases = dict(bias_per_resolution)
        self._strengths = strengths
        self._prev = None
        self._installed = False
        self.enabled = True

    def _override(self, site, q, k, v, sigma):
        if not self.enabled:
            return None  # fall through to the site's default attention
        bias = self._biases[site.resolution]
        return biased_cross_attention(q, k, v, bias, self._strengths, sigma)

    def install(self) -> "AttentionHooks":
        missing = [
            s for s in self._backend.attention_sites() if s.resolution not in self._biases
        ]
        if missing:
            raise MissingBiasError(
                "no bias built for attention resolutions: "
                + ", ".join(f"{s.name}@{s.resolution}" for s in missing)
            )
        self._prev = self._backend.attention_override
        self._backend.set_attention_override(self._override)
        self._installed = True
        return self

    def uninstall(self) -> None:
        if self._installed:
            self._backend.set_attention_override(self._prev)
            self._installed = False

    def suspended(self):
        """Context manager: temporarily fall back to unbiased attention."""
        return _Suspended(self)

    def __enter__(self):
        return self.install()

    def __exit__(self, *exc):
        self.uninstall()


class _Suspended:
    def __init__(self, hooks: AttentionHooks):
        self._hooks = hooks

    def __enter__(self):
        self._was = self._hooks.enabled
        self._hooks.enabled = False

    def __exit__(self, *exc):
        self._hooks.enabled = self._was


def install_hooks(backend, bias_per_resolution, strengths: AttentionStrengths) -> AttentionHooks:
    """Install biased attention on every site; returns the revocation handle."""
    return AttentionHooks(backend, bias_per_resolution, strengths).install()
