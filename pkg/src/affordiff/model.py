"""The waypoint denoiser: motion-aware visual tokens, DiT blocks with
alternating image/text cross-attention, and a nonlinear coordinate head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numerics as nx
from .data import VOCAB
from .encoders import (
    ImageEncoder,
    TextEncoder,
    TokenSequence,
    frame_grid_embedding,
    sinusoid,
)
from .layers import MLP, LayerNorm, Linear, Module, MultiHeadAttention
from .numerics import Tensor


class CheckpointMismatch(ValueError):
    """A stored tensor does not fit the model it is being loaded into."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    chunk_size: int = 5
    patch_size: int = 4
    image_size: int = 64
    vocab_size: int = len(VOCAB)
    mlp_ratio: int = 4
    disable_poa: bool = False
    disable_sial: bool = False
    cross_attention_order: str = "image-first"
    freeze_encoders: bool = False
    # "index" embeds the flat patch index; "row-col" embeds patch row and column separately
    spatial_embedding: str = "row-col"

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} must be divisible by n_heads {self.n_heads}")
        if self.d_model % 4:
            raise ValueError("d_model must be divisible by 4 for the 2-axis grid embedding")
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.cross_attention_order not in ("image-first", "text-first"):
            raise ValueError(f"unknown cross_attention_order {self.cross_attention_order!r}")
        if self.spatial_embedding not in ("index", "row-col"):
            raise ValueError(f"unknown spatial_embedding {self.spatial_embedding!r}")
        if self.spatial_embedding == "row-col" and self.d_model % 8:
            raise ValueError("d_model must be divisible by 8 for the row/column grid embedding")

    @property
    def tokens_per_frame(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def visual_tokens(self) -> int:
        return self.tokens_per_frame * (1 if self.disable_poa else 2)

    def layer_condition(self, i: int) -> str:
        first, second = ("image", "text") if self.cross_attention_order == "image-first" else ("text", "image")
        return first if i % 2 == 0 else second

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class Conditions:
    """Encoded observation and instruction, reused across sampler steps."""

    visual: TokenSequence
    text: TokenSequence


def position_offset_attention(cur: TokenSequence, prev: TokenSequence, disable: bool = False) -> TokenSequence:
    """Current-frame tokens followed by their offsets from the previous frame."""
    if cur.tokens.shape != prev.tokens.shape:
        raise nx.ShapeError(
            f"frame token shapes differ: {cur.tokens.shape} vs {prev.tokens.shape}"
        )
    if disable:
        return TokenSequence(cur.tokens, "image")
    motion = cur.tokens - prev.tokens
    return TokenSequence(nx.concat([cur.tokens, motion], axis=-2), "image")


class DiTBlock(Module):
    def __init__(self, d: int, n_heads: int, mlp_ratio: int, condition: str,
                 rng: np.random.Generator, dtype):
        self.condition = condition
        self.norm1 = LayerNorm(d, dtype)
        self.self_attn = MultiHeadAttention(d, n_heads, rng, dtype)
        self.norm2 = LayerNorm(d, dtype)
        self.cross_attn = MultiHeadAttention(d, n_heads, rng, dtype)
        self.norm3 = LayerNorm(d, dtype)
        self.mlp = MLP(d, mlp_ratio * d, rng, dtype)

    def __call__(self, x: Tensor, context: Tensor, mask=None) -> Tensor:
        x = x + self.self_attn(self.norm1(x))
        x = x + self.cross_attn(self.norm2(x), context, mask)
        return x + self.mlp(self.norm3(x))


class SpatialHead(Module):
    """Per-token projection from the latent width back to 2 coordinates.

    The full head is a two-layer MLP; with ``linear=True`` a single linear
    map stands in for it.
    """

    def __init__(self, d: int, rng: np.random.Generator, dtype, linear: bool = False):
        self.hidden = None if linear else Linear(d, d, rng, dtype)
        self.out = Linear(d, 2, rng, dtype, scale=0.1)

    def __call__(self, h: Tensor) -> Tensor:
        if self.hidden is not None:
            h = nx.gelu(self.hidden(h))
        return self.out(h)


class Denoiser(Module):
    """Predicts clean waypoints from (timestep, noisy waypoints, frames, instruction)."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        d = config.d_model
        self.image_encoder = ImageEncoder(config.patch_size, d, rng, dtype)
        self.text_encoder = TextEncoder(config.vocab_size, d, config.n_heads, rng, dtype)
        self.waypoint_in = Linear(2, d, rng, dtype)
        self.time_fc1 = Linear(d, d, rng, dtype)
        self.time_fc2 = Linear(d, d, rng, dtype)
        self.blocks = [
            DiTBlock(d, config.n_heads, config.mlp_ratio, config.layer_condition(i), rng, dtype)
            for i in range(config.n_layers)
        ]
        self.final_norm = LayerNorm(d, dtype)
        self.head = SpatialHead(d, rng, dtype, linear=config.disable_sial)
        n_frames = 1 if config.disable_poa else 2
        grid_width = config.image_size // config.patch_size if config.spatial_embedding == "row-col" else None
        self._grid = frame_grid_embedding(n_frames, config.tokens_per_frame, d, grid_width).astype(dtype)
        self._seq_pos = sinusoid(np.arange(config.chunk_size + 1), d).astype(dtype)

    # parameters ---------------------------------------------------------

    def trainable_parameters(self) -> list[Tensor]:
        frozen = set()
        if self.config.freeze_encoders:
            frozen = {id(p) for p in self.image_encoder.parameters() + self.text_encoder.parameters()}
        return [p for p in self.parameters() if id(p) not in frozen]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, tensors: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(tensors))
            if missing:
                raise CheckpointMismatch(f"checkpoint lacks tensor {missing[0]!r}")
            extra = sorted(set(tensors) - set(own))
            if extra:
                raise CheckpointMismatch(f"checkpoint tensor {extra[0]!r} has no place in the model")
        for name, p in own.items():
            if name not in tensors:
                continue
            arr = np.asarray(tensors[name])
            if arr.shape != p.shape:
                raise CheckpointMismatch(
                    f"tensor {name!r}: checkpoint shape {arr.shape} != model shape {p.shape}"
                )
            p.data = arr.astype(self.dtype, copy=True)

    # conditioning -------------------------------------------------------

    def encode_conditions(self, image_current, image_previous, text_ids, text_mask=None) -> Conditions:
        """Encode frames and instruction. Leading axes are batch axes."""
        if image_previous is None:
            image_previous = image_current
        cur = self.image_encoder(image_current)
        prev = self.image_encoder(image_previous)
        visual = position_offset_attention(cur, prev, disable=self.config.disable_poa)
        visual = TokenSequence(visual.tokens + Tensor(self._grid), "image")
        text = self.text_encoder(text_ids, text_mask)
        return Conditions(visual, text)

    def encode_batch(self, batch) -> Conditions:
        return self.encode_conditions(batch.image_current, batch.image_previous, batch.text_ids, batch.text_mask)

    # denoising ----------------------------------------------------------

    def embed_waypoints(self, x_noisy, k) -> TokenSequence:
        """Project each point to ``d_model`` and prepend one timestep token."""
        x = x_noisy if isinstance(x_noisy, Tensor) else Tensor(x_noisy, dtype=self.dtype)
        k = np.asarray(k)
        lead = x.shape[:-2]
        k = np.broadcast_to(k, lead)
        temb = Tensor(sinusoid(k, self.config.d_model)[..., None, :], dtype=self.dtype)
        t_tok = self.time_fc2(nx.silu(self.time_fc1(temb)))
        return TokenSequence(nx.concat([t_tok, self.waypoint_in(x)], axis=-2), "waypoint")

    def sial_head(self, hidden: Tensor) -> Tensor:
        return self.head(hidden)

    def __call__(self, k, x_noisy, cond: Conditions) -> Tensor:
        T = self.config.chunk_size
        x = x_noisy if isinstance(x_noisy, Tensor) else Tensor(x_noisy, dtype=self.dtype)
        if x.shape[-2:] != (T, 2):
            raise nx.ShapeError(f"noisy waypoints must be [..., {T}, 2], got {x.shape}")
        h = self.embed_waypoints(x, k).tokens + Tensor(self._seq_pos)
        for block in self.blocks:
            if block.condition == "image":
                h = block(h, cond.visual.tokens)
            else:
                h = block(h, cond.text.tokens, cond.text.mask)
        h = self.final_norm(h)
        return self.sial_head(h[..., 1:, :])
