"""Token-role classification: which prompt tokens belong to which layer.

A token is a layer token iff its character span lies entirely inside exactly
one layer's text span; start/end/padding tokens and anything straddling a
span boundary stay global. Roles are stored as a per-position int vector:
0 = global, k >= 1 = layer k's token.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .model import Collage, CollageError

GLOBAL = 0


class OverlappingSpansError(CollageError):
    pass


@dataclass(frozen=True)
class Token:
    """One tokenizer output position: vocab id + source character span."""

    id: int
    start: int
    end: int
    special: bool = False  # start/end/padding markers


class PromptTokenizer(Protocol):
    """Minimal tokenizer surface: per-token character offsets are required."""

    token_limit: int

    def tokenize(self, text: str) -> list[Token]: ...


@dataclass(frozen=True)
class TokenRoleMap:
    """Role per tokenized prompt position."""

    roles: np.ndarray  # (N_t,) int32, 0 = global

    def __post_init__(self):
        r = np.ascontiguousarray(self.roles, dtype=np.int32)
        r.flags.writeable = False
        object.__setattr__(self, "roles", r)

    @property
    def token_count(self) -> int:
        return int(self.roles.shape[0])

    def layer_token_positions(self, layer_index: int) -> np.ndarray:
        return np.flatnonzero(self.roles == layer_index)

    def is_global(self, position: int) -> bool:
        return self.roles[position] == GLOBAL


def classify_tokens(collage: Collage, tokenizer: PromptTokenizer) -> TokenRoleMap:
    """Assign each prompt token to its owning layer or to the global pool.

    Rejects collages whose layer spans overlap; a token partially covered by
    a span is conservatively global.
    """
    spans = [(l.text_span, i) for i, l in enumerate(collage.layers, start=1)]
    occupied = sorted((s for s, _ in spans if s[0] < s[1]))
    for (s0, e0), (s1, e1) in zip(occupied, occupied[1:]):
        if s1 < e0:
            raise OverlappingSpansError(
                f"layer spans ({s0}, {e0}) and ({s1}, {e1}) overlap in prompt"
            )
    tokens = tokenizer.tokenize(collage.prompt)
    roles = np.zeros(len(tokens), dtype=np.int32)
    for pos, tok in enumerate(tokens):
        if tok.special or tok.end <= tok.start:
            continue
        for (s, e), idx in spans:
            if s <= tok.start and tok.end <= e:
                roles[pos] = idx
                break
    return TokenRoleMap(roles)


@dataclass(frozen=True)
class EncodedPrompt:
    """A prompt ready for the text encoder: vocab ids with optional learned
    embedding vectors spliced in (entries with id None read from `vectors`)."""

    ids: tuple[int | None, ...]
    roles: TokenRoleMap
    vectors: dict[int, object] = None  # position -> embedding tensor

    def __post_init__(self):
        object.__setattr__(self, "vectors", dict(self.vectors or {}))
        if len(self.ids) != self.roles.token_count:
            raise CollageError(
                f"encoded prompt length {len(self.ids)} != role count {self.roles.token_count}"
            )
        for pos, tok_id in enumerate(self.ids):
            if tok_id is None and pos not in self.vectors:
                raise CollageError(f"position {pos} has neither a vocab id nor a vector")

    @property
    def length(self) -> int:
        return len(self.ids)


def encode_prompt_tokens(
    collage: Collage, tokenizer: PromptTokenizer, roles: TokenRoleMap | None = None
) -> EncodedPrompt:
    """Tokenize the collage prompt and pair it with its role map."""
    tokens = tokenizer.tokenize(collage.prompt)
    if roles is None:
        roles = classify_tokens(collage, tokenizer)
    return EncodedPrompt(ids=tuple(t.id for t in tokens), roles=roles)


def global_roles(ids: Sequence[int]) -> TokenRoleMap:
    """All-global role map (negative prompts, plain strings)."""
    return TokenRoleMap(np.zeros(len(ids), dtype=np.int32))
