"""Diffusion backend abstraction and the desk-scale mock backend.

A backend bundles a denoiser D(x, sigma, cond) predicting the clean latent,
a tokenizer/text encoder, an image<->latent codec, a noise schedule
sigma(t) over normalized time t in [0, 1], and an enumerable registry of
cross-attention sites that an override can be installed on.

The mock backend is a randomly-initialized two-level UNet in float64 with
real multi-head cross-attention at both levels, a linear sigma schedule,
and an orthonormal-projection codec whose decode(encode(x)) is a block
average (idempotent, so already-decoded images round-trip exactly). It is
fully deterministic given its construction seed; every sampling-time random
draw goes through an explicit generator.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
import torch
import torch.nn as nn

from .attention import plain_cross_attention
from .imageops import block_mean
from .tokens import EncodedPrompt, PromptTokenizer, Token


class BackendError(Exception):
    pass


class TokenLimitError(BackendError):
    pass


@dataclass(frozen=True)
class AttentionSite:
    """One cross-attention location in the denoiser."""

    name: str
    resolution: tuple[int, int]  # (h, w) of the query grid
    heads: int


# Override signature: (site, q, k, v, sigma) -> output or None to fall back.
AttentionOverride = Callable[..., "torch.Tensor | None"]


class DiffusionBackend(Protocol):
    stride: int
    token_limit: int
    token_width: int
    tokenizer: PromptTokenizer

    @property
    def latent_shape(self) -> tuple[int, int, int]: ...
    @property
    def canvas(self) -> tuple[int, int]: ...
    @property
    def attention_override(self) -> AttentionOverride | None: ...
    def set_attention_override(self, fn: AttentionOverride | None) -> None: ...
    def attention_sites(self) -> tuple[AttentionSite, ...]: ...
    def sigma(self, t: float) -> float: ...
    def sample_training_sigma(self, gen: torch.Generator) -> float: ...
    def token_embedding(self, token_id: int) -> torch.Tensor: ...
    def encode_prompt(self, encoded: EncodedPrompt) -> torch.Tensor: ...
    def encode_image(self, rgb: np.ndarray) -> torch.Tensor: ...
    def decode_latent(self, z: torch.Tensor) -> np.ndarray: ...
    def denoise(
        self, x: torch.Tensor, sigma: float, cond: torch.Tensor, control=None
    ) -> torch.Tensor: ...
    def checksum(self) -> str: ...


class WordTokenizer:
    """Whitespace/punctuation tokenizer with character offsets.

    Vocabulary ids are stable hashes, so any text tokenizes without a fitted
    vocab. Start and end markers carry empty spans and classify as global.
    """

    BOS, EOS = 0, 1
    _pattern = re.compile(r"\w+|[^\w\s]")

    def __init__(self, token_limit: int = 77, vocab_size: int = 4096):
        self.token_limit = token_limit
        self.vocab_size = vocab_size

    def word_id(self, word: str) -> int:
        digest = hashlib.blake2s(word.lower().encode()).digest()
        return 4 + int.from_bytes(digest[:4], "little") % (self.vocab_size - 4)

    def tokenize(self, text: str) -> list[Token]:
        tokens = [Token(self.BOS, 0, 0, special=True)]
        for m in self._pattern.finditer(text):
            tokens.append(Token(self.word_id(m.group()), m.start(), m.end()))
        tokens.append(Token(self.EOS, len(text), len(text), special=True))
        if len(tokens) > self.token_limit:
            raise TokenLimitError(
                f"prompt tokenizes to {len(tokens)} tokens, limit {self.token_limit}"
            )
        return tokens


def _fourier_features(value: float, n: int, dtype, device) -> torch.Tensor:
    freqs = torch.arange(n // 2, dtype=dtype, device=device)
    angles = value * (2.0 ** freqs) * 0.5
    return torch.cat([torch.sin(angles), torch.cos(angles)])


class _ResBlock(nn.Module):
    def __init__(self, channels: int, emb_width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.film = nn.Linear(emb_width, 2 * channels)

    def forward(self, x, emb):
        scale, shift = self.film(emb).chunk(2)
        h = self.conv1(torch.nn.functional.silu(x))
        h = h * (1 + scale[:, None, None]) + shift[:, None, None]
        h = self.conv2(torch.nn.functional.silu(h))
        return x + h


class _CrossAttention(nn.Module):
    def __init__(self, site: AttentionSite, channels: int, cond_width: int):
        super().__init__()
        self.site = site
        self.heads = site.heads
        self.head_dim = channels // site.heads
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(cond_width, channels, bias=False)
        self.to_v = nn.Linear(cond_width, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x, cond, sigma, override):
        c, h, w = x.shape
        tokens = x.reshape(c, h * w).T  # (N_v, C)
        n_v, n_t = tokens.shape[0], cond.shape[0]

        def split(t, n):
            return t.reshape(n, self.heads, self.head_dim).permute(1, 0, 2)

        q = split(self.to_q(tokens), n_v)
        k = split(self.to_k(cond), n_t)
        v = split(self.to_v(cond), n_t)
        out = None
        if override is not None:
            out = override(self.site, q, k, v, sigma)
        if out is None:
            out = plain_cross_attention(q, k, v)
        merged = out.permute(1, 0, 2).reshape(n_v, c)
        return x + self.to_out(merged).T.reshape(c, h, w)


class _MockUNet(nn.Module):
    """Two-level UNet: attention at full and half latent resolution."""

    def __init__(self, latent_hw, channels, cond_width, heads, emb_width=16):
        super().__init__()
        h, w = latent_hw
        if h % 2 or w % 2:
            raise BackendError(f"latent dims {latent_hw} must be even")
        self.emb_width = emb_width
        self.sigma_mlp = nn.Sequential(nn.Linear(emb_width, emb_width), nn.SiLU())
        self.conv_in = nn.Conv2d(4, channels, 3, padding=1)
        self.res1 = _ResBlock(channels, emb_width)
        self.attn1 = _CrossAttention(
            AttentionSite("down_0", (h, w), heads), channels, cond_width
        )
        self.down = nn.Conv2d(channels, 2 * channels, 3, stride=2, padding=1)
        self.res2 = _ResBlock(2 * channels, emb_width)
        self.attn2 = _CrossAttention(
            AttentionSite("mid_0", (h // 2, w // 2), heads), 2 * channels, cond_width
        )
        self.up = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.conv_out = nn.Conv2d(channels, 4, 3, padding=1)

    @property
    def sites(self):
        return (self.attn1.site, self.attn2.site)

    def forward(self, x, sigma, cond, control, override):
        dt = x.dtype
        emb = self.sigma_mlp(
            _fourier_features(math.log1p(sigma), self.emb_width, dt, x.device)
        )
        h = self.conv_in(x[None])[0]
        h = self.res1(h, emb)
        h = self.attn1(h, cond, sigma, override)
        if control is not None and "down_0" in control:
            h = h + control["down_0"]
        skip = h
        h = self.down(h[None])[0]
        h = self.res2(h, emb)
        h = self.attn2(h, cond, sigma, override)
        if control is not None and "mid_0" in control:
            h = h + control["mid_0"]
        h = self.up(torch.repeat_interleave(torch.repeat_interleave(h, 2, -1), 2, -2)[None])[0]
        h = h + skip
        return self.conv_out(torch.nn.functional.silu(h)[None])[0]


class _MockTextEncoder(nn.Module):
    def __init__(self, vocab_size, width, token_limit):
        super().__init__()
        self.table = nn.Parameter(torch.randn(vocab_size, width) * 0.1)
        self.positions = nn.Parameter(torch.randn(token_limit, width) * 0.02)
        self.proj = nn.Linear(width, width)

    def embed(self, token_id: int) -> torch.Tensor:
        return self.table[token_id].detach().clone()

    def forward(self, entries: list) -> torch.Tensor:
        # entries: token ids or ready embedding tensors (trainable allowed)
        rows = [
            e if isinstance(e, torch.Tensor) else self.table[e].detach() for e in entries
        ]
        seq = torch.stack(rows) + self.positions[: len(rows)].detach()
        return torch.tanh(self.proj(seq))


class MockControlNet(nn.Module):
    """Tiny auxiliary net: condition image -> residual feature maps per site."""

    def __init__(self, latent_hw, channels, stride, seed: int):
        super().__init__()
        self.latent_hw = latent_hw
        self.stride = stride
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.conv_a = nn.Conv2d(3, channels, 3, padding=1)
            self.conv_down = nn.Conv2d(channels, channels, 3, padding=1)
            self.conv_mid = nn.Conv2d(channels, 2 * channels, 3, stride=2, padding=1)
        self.double()
        for p in self.parameters():
            p.requires_grad_(False)

    def feature_maps(self, condition: np.ndarray) -> dict[str, torch.Tensor]:
        """Condition image (canvas-res HxW or HxWx3, [0,1]) -> {site: map}."""
        cond = np.asarray(condition, dtype=np.float64)
        if cond.ndim == 2:
            cond = np.repeat(cond[:, :, None], 3, axis=2)
        small = block_mean(cond, self.latent_hw)
        x = torch.as_tensor(small).permute(2, 0, 1)
        h = torch.tanh(self.conv_a(x[None])[0])
        down = torch.tanh(self.conv_down(h[None])[0]) * 0.1
        mid = torch.tanh(self.conv_mid(h[None])[0]) * 0.1
        return {"down_0": down, "mid_0": mid}


class MockBackend:
    """Deterministic tiny latent-diffusion backend for desk-scale testing."""

    def __init__(
        self,
        seed: int = 0,
        latent_dims: tuple[int, int] = (8, 8),
        token_width: int = 16,
        channels: int = 8,
        heads: int = 2,
        stride: int = 8,
        sigma_max: float = 2.0,
        sigma_data: float = 0.5,
        token_limit: int = 77,
    ):
        self.seed = seed
        self.latent_dims = tuple(latent_dims)
        self.token_width = token_width
        self.stride = stride
        self.sigma_max = sigma_max
        self.sigma_data = sigma_data
        self.token_limit = token_limit
        self.tokenizer = WordTokenizer(token_limit=token_limit)
        self._override: AttentionOverride | None = None
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.unet = _MockUNet(self.latent_dims, channels, token_width, heads)
            self.text_encoder = _MockTextEncoder(
                self.tokenizer.vocab_size, token_width, token_limit
            )
            # Orthonormal 3->4 channel lift: decode(encode(rgb)) == block mean.
            q, _ = torch.linalg.qr(torch.randn(4, 3, dtype=torch.float64))
            self._lift = q
        self.unet.double()
        self.text_encoder.double()
        for p in self.parameters():
            p.requires_grad_(False)

    # -- structure ---------------------------------------------------------

    def parameters(self):
        yield from self.unet.parameters()
        yield from self.text_encoder.parameters()

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (4, *self.latent_dims)

    @property
    def canvas(self) -> tuple[int, int]:
        h, w = self.latent_dims
        return (w * self.stride, h * self.stride)

    def attention_sites(self) -> tuple[AttentionSite, ...]:
        return self.unet.sites

    @property
    def attention_override(self) -> AttentionOverride | None:
        return self._override

    def set_attention_override(self, fn: AttentionOverride | None) -> None:
        self._override = fn

    def checksum(self) -> str:
        digest = hashlib.blake2s()
        for p in self.parameters():
            digest.update(p.detach().numpy().tobytes())
        digest.update(self._lift.numpy().tobytes())
        return digest.hexdigest()

    def config_dict(self) -> dict:
        """Enough to rebuild this exact backend (sidecar reproducibility)."""
        return {
            "kind": "mock",
            "seed": self.seed,
            "latent_dims": list(self.latent_dims),
            "token_width": self.token_width,
            "stride": self.stride,
            "sigma_max": self.sigma_max,
            "checksum": self.checksum()[:16],
        }

    # -- schedule ----------------------------------------------------------

    def sigma(self, t: float) -> float:
        if not 0.0 <= t <= 1.0:
            raise BackendError(f"normalized time must be in [0, 1], got {t}")
        return self.sigma_max * t

    def sample_training_sigma(self, gen: torch.Generator) -> float:
        lo, hi = math.log(0.05), math.log(self.sigma_max)
        u = torch.empty(1, dtype=torch.float64).uniform_(lo, hi, generator=gen)
        return float(torch.exp(u))

    # -- text --------------------------------------------------------------

    def token_embedding(self, token_id: int) -> torch.Tensor:
        return self.text_encoder.embed(token_id)

    def encode_prompt(self, encoded: EncodedPrompt) -> torch.Tensor:
        if encoded.length > self.token_limit:
            raise TokenLimitError(
                f"encoded prompt has {encoded.length} positions, limit {self.token_limit}"
            )
        entries = [
            encoded.vectors[pos] if tok_id is None else tok_id
            for pos, tok_id in enumerate(encoded.ids)
        ]
        return self.text_encoder(entries)

    # -- images ------------------------------------------------------------

    def encode_image(self, rgb: np.ndarray) -> torch.Tensor:
        rgb = np.asarray(rgb, dtype=np.float64)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise BackendError(f"encode_image expects (H, W, 3), got {rgb.shape}")
        ch, cw = rgb.shape[:2]
        if (cw, ch) != self.canvas:
            raise BackendError(f"image {cw}x{ch} does not match backend canvas {self.canvas}")
        small = torch.as_tensor(block_mean(rgb, self.latent_dims))  # (h, w, 3)
        return torch.einsum("cj,hwj->chw", self._lift, small)

    def decode_latent(self, z: torch.Tensor) -> np.ndarray:
        rgb_small = torch.einsum("cj,chw->hwj", self._lift, z.detach())
        up = torch.repeat_interleave(
            torch.repeat_interleave(rgb_small, self.stride, 0), self.stride, 1
        )
        return np.clip(up.numpy(), 0.0, 1.0)

    # -- denoising ---------------------------------------------------------

    def denoise(self, x: torch.Tensor, sigma: float, cond: torch.Tensor, control=None) -> torch.Tensor:
        """EDM-preconditioned prediction of the clean latent."""
        if tuple(x.shape) != self.latent_shape:
            raise BackendError(f"latent shape {tuple(x.shape)} != {self.latent_shape}")
        sd2 = self.sigma_data**2
        denom = sigma**2 + sd2
        c_skip = sd2 / denom
        c_out = sigma * self.sigma_data / math.sqrt(denom)
        c_in = 1.0 / math.sqrt(denom)
        net = self.unet(c_in * x, sigma, cond, control, self._override)
        return c_skip * x + c_out * net


def mock_backend(
    seed: int = 0,
    latent_dims: tuple[int, int] = (8, 8),
    token_width: int = 16,
    **kwargs,
) -> MockBackend:
    """Build the desk-scale verification backend (latent dims capped at 16)."""
    if max(latent_dims) > 16:
        raise BackendError(f"mock backend is desk-scale only; latent dims {latent_dims} > 16")
    return MockBackend(seed=seed, latent_dims=latent_dims, token_width=token_width, **kwargs)


# -- backend registry ---------------------------------------------------------
#
# Real checkpoints plug in here: implement DiffusionBackend against your
# runtime, register a factory, and point configuration at it. Checkpoint
# identity/paths live in the config, never in this repo.

_BACKEND_FACTORIES: dict[str, Callable[..., DiffusionBackend]] = {}


def register_backend(kind: str, factory: Callable[..., DiffusionBackend]) -> None:
    _BACKEND_FACTORIES[kind] = factory


def backend_from_config(config: dict) -> DiffusionBackend:
    """Instantiate a backend from {'kind': ..., **factory_kwargs}."""
    cfg = dict(config)
    kind = cfg.pop("kind", "mock")
    expected = cfg.pop("checksum", None)
    if kind == "mock":
        if "latent_dims" in cfg:
            cfg["latent_dims"] = tuple(cfg["latent_dims"])
        backend = mock_backend(**cfg)
        if expected is not None and backend.checksum()[:16] != expected:
            raise BackendError(
                f"backend checksum mismatch: config expects {expected}, "
                f"got {backend.checksum()[:16]}"
            )
        return backend
    if kind in _BACKEND_FACTORIES:
        return _BACKEND_FACTORIES[kind](**cfg)
    raise BackendError(
        f"unknown backend kind '{kind}'; register a factory with register_backend()"
    )
