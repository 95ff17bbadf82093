"""Patch image encoder, small text encoder and grid sinusoidal embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .layers import LayerNorm, Linear, Module, MultiHeadAttention
from .numerics import Tensor

TOKEN_KINDS = ("image", "text", "waypoint", "timestep")


@dataclass
class TokenSequence:
    tokens: Tensor  # [..., n_tokens, d_model]
    kind: str
    mask: np.ndarray | None = None  # [..., n_tokens] bool, text only

    def __post_init__(self):
        if self.kind not in TOKEN_KINDS:
            raise ValueError(f"unknown token kind {self.kind!r}")
        if self.tokens.ndim < 2 or self.tokens.shape[-2] < 1:
            raise ValueError("a token sequence needs at least one token")

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[-2]


def sinusoid(positions, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Interleaved ``[sin, cos, sin, cos, ...]`` embedding of scalar positions.

    Pair ``j`` uses angular frequency ``max_period ** (-2j / dim)``.
    """
    if dim % 2:
        raise ValueError("sinusoidal embedding width must be even")
    pos = np.asarray(positions, dtype=np.float64)
    freqs = max_period ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    angles = pos[..., None] * freqs
    out = np.empty(pos.shape + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def positional_embedding(coords, d_model: int) -> np.ndarray:
    """Concatenated per-axis sinusoids for grid coordinates.

    ``coords`` has shape ``[..., n_axes]``; each axis receives
    ``d_model / n_axes`` channels.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if np.any(coords < 0):
        raise ValueError("grid coordinates must be nonnegative")
    n_axes = coords.shape[-1]
    if d_model % (2 * n_axes):
        raise ValueError(f"d_model {d_model} must be divisible by {2 * n_axes}")
    per_axis = d_model // n_axes
    return np.concatenate([sinusoid(coords[..., a], per_axis) for a in range(n_axes)], axis=-1)


def frame_grid_embedding(n_frames: int, n_tokens: int, d_model: int, grid_width: int | None = None) -> np.ndarray:
    """``[n_frames * n_tokens, d_model]`` table for (frame slot, token index).

    With ``grid_width`` the token axis is itself split into (row, column) of
    a row-major patch grid, each taking half of the token-axis channels.
    """
    f, t = np.meshgrid(np.arange(n_frames), np.arange(n_tokens), indexing="ij")
    f, t = f.ravel(), t.ravel()
    if grid_width is None:
        return positional_embedding(np.stack([f, t], axis=-1), d_model)
    if n_tokens % grid_width:
        raise ValueError(f"{n_tokens} tokens do not fill rows of {grid_width}")
    half = d_model // 2
    if d_model % 8:
        raise ValueError(f"d_model {d_model} must be divisible by 8 for a row/column grid")
    frame = sinusoid(f, half)
    rc = positional_embedding(np.stack([t // grid_width, t % grid_width], axis=-1), half)
    return np.concatenate([frame, rc], axis=-1)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[..., H, W, 3]`` uint8 -> ``[..., (H/P)*(W/P), P*P*3]`` floats in [0, 1], row-major patches."""
    images = np.asarray(images)
    *lead, h, w, c = images.shape
    if h % patch or w % patch:
        raise ValueError(f"image {w}x{h} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = images.reshape(*lead, gh, patch, gw, patch, c)
    x = np.moveaxis(x, -4, -3)  # [..., gh, gw, patch, patch, c]
    return x.reshape(*lead, gh * gw, patch * patch * c) / 255.0


class ImageEncoder(Module):
    """Non-overlapping P x P patches, each linearly projected to ``d_model``."""

    def __init__(self, patch: int, d_model: int, rng: np.random.Generator, dtype=np.float32):
        self.patch = patch
        self.proj = Linear(patch * patch * 3, d_model, rng, dtype)

    def __call__(self, images: np.ndarray) -> TokenSequence:
        x = Tensor(patchify(images, self.patch), dtype=self.proj.weight.dtype)
        return TokenSequence(self.proj(x), "image")


class TextEncoder(Module):
    """Embedding lookup, 1-D sinusoid, one pre-norm self-attention layer."""

    def __init__(self, vocab_size: int, d_model: int, n_heads: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.vocab_size = vocab_size
        self.table = Tensor(rng.normal(0.0, 1.0, size=(vocab_size, d_model)).astype(dtype),
                            requires_grad=True)
        self.norm = LayerNorm(d_model, dtype)
        self.attn = MultiHeadAttention(d_model, n_heads, rng, dtype)

    def __call__(self, ids, mask=None) -> TokenSequence:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 0 or ids.shape[-1] < 1:
            raise ValueError("instruction must hold at least one token id")
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise ValueError(f"token id outside vocabulary of size {self.vocab_size}")
        if mask is None:
            mask = np.ones(ids.shape, dtype=bool)
        d = self.table.shape[1]
        pos = Tensor(sinusoid(np.arange(ids.shape[-1]), d), dtype=self.table.dtype)
        x = nx.embedding(self.table, ids) + pos
        x = x + self.attn(self.norm(x), mask=mask)
        return TokenSequence(x, "text", np.asarray(mask, dtype=bool))
