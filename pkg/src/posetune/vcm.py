"""Visual consistency components.

Covers the identity path (face embedding -> projected face tokens -> single
wrapped token substituted into cross-attention values), the style path
(foreground image -> style tokens injected as an extra attention term at
whitelisted blocks), and the two alternative identity strategies used for
ablations.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, PreconditionError
from .torchinit import init_conv, init_linear

DEFAULT_WHITELIST = frozenset({"up.blocks.0.attentions.0", "up.blocks.0.attentions.1"})

FACE_TOKEN = "<face>"


class IdentityStrategy(str, Enum):
    VALUE_ONLY = "value_only"
    FULL_REPLACEMENT = "full_replacement"
    ADDED_CROSS_ATTENTION = "added_cross_attention"


STRATEGY_LABELS = {
    IdentityStrategy.VALUE_ONLY: "Value-Only Replacement",
    IdentityStrategy.FULL_REPLACEMENT: "Full Token Replacement",
    IdentityStrategy.ADDED_CROSS_ATTENTION: "Cross-Attention",
}


def parse_strategy(name) -> IdentityStrategy:
    if isinstance(name, IdentityStrategy):
        return name
    try:
        return IdentityStrategy(str(name).lower())
    except ValueError:
        raise ConfigurationError(f"unknown identity strategy: {name!r}") from None


@dataclass
class InjectionConfig:
    """Style/identity injection settings.

    ``whitelist`` names the attention blocks that receive style injection,
    ``lambda_style`` scales the injected term, ``s`` is the wrapped-token
    intensity, and ``lambda_face`` scales the added-attention ablation mode.
    """

    whitelist: frozenset = DEFAULT_WHITELIST
    lambda_style: float = 1.0
    s: float = 4.0
    strategy: IdentityStrategy = IdentityStrategy.VALUE_ONLY
    lambda_face: float = 1.0

    def __post_init__(self):
        self.whitelist = frozenset(self.whitelist)
        self.strategy = parse_strategy(self.strategy)
        if self.lambda_style < 0:
            raise ConfigurationError("lambda_style must be >= 0")


@dataclass
class TokenSequence:
    """Ordered conditioning embeddings with an optional marked face slot."""

    embeddings: torch.Tensor  # [L, d_text]
    face_slot: int | None = None

    def __post_init__(self):
        if self.face_slot is not None and not (0 <= self.face_slot < self.embeddings.shape[0]):
            raise ConfigurationError(
                f"face_slot {self.face_slot} outside sequence of length {self.embeddings.shape[0]}"
            )


@dataclass
class FaceConditioning:
    """Resolved identity-path inputs handed to attention sublayers."""

    v_star: torch.Tensor  # [d_text]
    face_tokens: torch.Tensor  # [N, d_text]
    strategy: IdentityStrategy = IdentityStrategy.VALUE_ONLY
    lambda_face: float = 1.0


def _token_vector(word: str, d_text: int) -> np.ndarray:
    digest = hashlib.sha256(word.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:4], "little")
    rng = np.random.RandomState(seed)
    return rng.standard_normal(d_text)


def embed_description(text: str, d_text: int, dtype: torch.dtype = torch.float64) -> TokenSequence:
    """Deterministic hash-based token embeddings; ``<face>`` marks the face slot."""
    words = text.strip().lower().split()
    if not words:
        raise ConfigurationError("description is empty")
    rows = np.stack([_token_vector(w, d_text) for w in words])
    face_slot = words.index(FACE_TOKEN) if FACE_TOKEN in words else None
    return TokenSequence(torch.from_numpy(rows).to(dtype), face_slot)


class FaceProjector(nn.Module):
    """Face embedding -> N face tokens: a two-layer MLP fans the embedding out
    to N intermediate tokens, then a shared affine maps each into text space."""

    def __init__(self, d_face: int, d_mid: int, n_tokens: int, d_text: int,
                 generator: torch.Generator, dtype: torch.dtype = torch.float64):
        super().__init__()
        if n_tokens < 1:
            raise ConfigurationError("need at least one face token")
        self.d_face = d_face
        self.d_mid = d_mid
        self.n_tokens = n_tokens
        self.projection = nn.Sequential(
            nn.Linear(d_face, d_mid, dtype=dtype),
            nn.GELU(),
            nn.Linear(d_mid, n_tokens * d_mid, dtype=dtype),
        )
        self.linear = nn.Linear(d_mid, d_text, dtype=dtype)
        init_linear(self.projection[0], generator)
        init_linear(self.projection[2], generator)
        init_linear(self.linear, generator)

    def forward(self, embedding: torch.Tensor) -> torch.Tensor:
        if embedding.shape != (self.d_face,):
            raise ConfigurationError(
                f"face embedding must be [{self.d_face}], got {tuple(embedding.shape)}"
            )
        mid = self.projection(embedding.to(self.linear.weight.dtype))
        mid = mid.reshape(self.n_tokens, self.d_mid)
        return self.linear(mid)  # [N, d_text]


def project_face(projector: FaceProjector, embedding: torch.Tensor) -> torch.Tensor:
    return projector(embedding)


def wrap_face_token(face_tokens: torch.Tensor, s: float) -> torch.Tensor:
    """Collapse N face tokens into one: per-dimension softmax over the token
    axis, weighted sum, scaled by the intensity constant s."""
    if face_tokens.dim() != 2 or face_tokens.shape[0] < 1:
        raise ConfigurationError(f"face tokens must be [N, d] with N >= 1, got {tuple(face_tokens.shape)}")
    weights = torch.softmax(face_tokens, dim=0)
    return s * (weights * face_tokens).sum(dim=0)


def replace_value_token(tokens: TokenSequence, v_star: torch.Tensor):
    """Substitute the wrapped token into the value sequence only.

    Returns (key_sequence, value_sequence); keys are the untouched embeddings
    so attention maps cannot change.
    """
    if tokens.face_slot is None:
        raise PreconditionError("token sequence has no face slot to replace")
    values = tokens.embeddings.clone()
    values[tokens.face_slot] = v_star.to(values.dtype)
    return tokens.embeddings, values


def key_value_sequences(tokens: TokenSequence, face: FaceConditioning | None):
    """Key/value token sequences for one attention sublayer under the active
    identity strategy. ADDED_CROSS_ATTENTION leaves both untouched (its face
    term is additive, handled in the attention block)."""
    emb = tokens.embeddings
    if face is None or face.strategy is IdentityStrategy.ADDED_CROSS_ATTENTION:
        return emb, emb
    if face.strategy is IdentityStrategy.VALUE_ONLY:
        return replace_value_token(tokens, face.v_star)
    if face.strategy is IdentityStrategy.FULL_REPLACEMENT:
        _, replaced = replace_value_token(tokens, face.v_star)
        return replaced, replaced
    raise ConfigurationError(f"unknown identity strategy: {face.strategy!r}")


class StyleEncoder(nn.Module):
    """Strided conv encoder from an alpha-premultiplied foreground to style tokens."""

    def __init__(self, d_text: int, channels: tuple[int, int] = (16, 32),
                 pool: tuple[int, int] = (2, 4), generator: torch.Generator | None = None,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        c1, c2 = channels
        self.conv1 = nn.Conv2d(3, c1, 3, stride=2, padding=1, dtype=dtype)
        self.conv2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1, dtype=dtype)
        self.conv3 = nn.Conv2d(c2, d_text, 3, stride=2, padding=1, dtype=dtype)
        self.pool = nn.AdaptiveAvgPool2d(pool)
        self.norm = nn.LayerNorm(d_text, dtype=dtype)
        self.n_tokens = pool[0] * pool[1]
        self.d_text = d_text
        if generator is not None:
            for conv in (self.conv1, self.conv2, self.conv3):
                init_conv(conv, generator)

    def forward(self, rgba: torch.Tensor) -> torch.Tensor:
        if rgba.dim() == 3:
            rgba = rgba.unsqueeze(0)
        x = rgba[:, :3] * rgba[:, 3:4]  # premultiply by alpha
        x = torch.nn.functional.gelu(self.conv1(x.to(self.conv1.weight.dtype)))
        x = torch.nn.functional.gelu(self.conv2(x))
        x = torch.nn.functional.gelu(self.conv3(x))
        x = self.pool(x)  # [1, d_text, ph, pw]
        return self.norm(x.flatten(2).transpose(1, 2).squeeze(0))  # [M, d_text]


def encode_style(encoder: StyleEncoder, foreground: torch.Tensor) -> torch.Tensor:
    return encoder(foreground)


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    # [..., L, C] -> [..., heads, L, C/heads]
    *lead, L, C = x.shape
    x = x.reshape(*lead, L, heads, C // heads)
    return x.transpose(-3, -2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    # [..., heads, L, dh] -> [..., L, heads*dh]
    x = x.transpose(-3, -2)
    *lead, L, h, dh = x.shape
    return x.reshape(*lead, L, h * dh)


def attention_probs(q: torch.Tensor, k: torch.Tensor, heads: int) -> torch.Tensor:
    """softmax(Q K^T / sqrt(d_head)) per head. q: [B, Lq, C], k: [Lk, C] or [B, Lk, C]."""
    if k.dim() == 2:
        k = k.unsqueeze(0).expand(q.shape[0], -1, -1)
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    scale = 1.0 / math.sqrt(qh.shape[-1])
    scores = torch.matmul(qh, kh.transpose(-1, -2)) * scale
    return torch.softmax(scores, dim=-1)  # [B, heads, Lq, Lk]


def apply_attention(probs: torch.Tensor, v: torch.Tensor, heads: int) -> torch.Tensor:
    if v.dim() == 2:
        v = v.unsqueeze(0).expand(probs.shape[0], -1, -1)
    vh = _split_heads(v, heads)
    return _merge_heads(torch.matmul(probs, vh))  # [B, Lq, C]


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int) -> torch.Tensor:
    return apply_attention(attention_probs(q, k, heads), v, heads)


def style_injection(q: torch.Tensor, style_tokens: torch.Tensor,
                    to_k: torch.Tensor, to_v: torch.Tensor,
                    lambda_style: float, heads: int) -> torch.Tensor:
    """Extra attention term over style tokens using the block's dedicated
    style projections. Callers apply this only at whitelisted block paths."""
    k = torch.nn.functional.linear(style_tokens, to_k)
    v = torch.nn.functional.linear(style_tokens, to_v)
    return lambda_style * attend(q, k, v, heads)
