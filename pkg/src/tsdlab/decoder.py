"""Teacher-student part decoder.

Both branches run the same layers with the same parameters. The student
cross-attends over every patch; the teacher adds a ``-inf`` bias to patches
outside its part mask so their attention weight is exactly zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadSelfAttention, attend, merge_heads, param, \
    split_heads, trunc_normal
from .tensor import Tensor, concat, sigmoid


@dataclass
class DecoderConfig:
    parts: int = 8
    dim: int = 64
    heads: int = 4
    ffn_dim: int = 128
    layers: int = 1
    # Patches per image; > 0 adds a learnable positional embedding to the keys.
    key_positions: int = 0
    key_pos_std: float = 1.0
    # False applies the teacher logits without the 1/sqrt(d) factor.
    scale_teacher: bool = True

    def __post_init__(self):
        if self.parts < 1 or self.layers < 1:
            raise ValueError("parts and layers must be >= 1")
        if self.dim % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide dim ({self.dim})")


@dataclass
class DecoderOutput:
    parts: Tensor          # [B, P, D]
    concat: Tensor         # [B, P*D]
    attention: np.ndarray  # [B, heads, P, N], last layer


class DegenerateMaskError(ValueError):
    """Every part row of a teacher mask is empty and the fallback is disabled."""


def mask_bias(mask: np.ndarray, allow_empty: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Additive attention bias for a binary part mask [..., P, N].

    Returns (bias, empty) where ``bias`` is 0 on mask entries and -inf
    elsewhere. Empty rows get an all-zero bias (attend everywhere) and are
    flagged in ``empty``.
    """
    mask = np.asarray(mask)
    on = mask > 0.5
    empty = ~on.any(axis=-1)
    if empty.any() and not allow_empty:
        raise DegenerateMaskError("part mask has empty rows and the empty-part fallback is disabled")
    bias = np.where(on | empty[..., None], 0.0, -np.inf)
    return bias, empty


class CrossAttention(Module):
    """Multi-head cross-attention without an output projection.

    Queries, keys and values are linear maps of the part tokens and patch
    features; the head outputs are concatenated back to width D.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.query_proj = Linear(dim, dim, rng)
        self.key_proj = Linear(dim, dim, rng)
        self.value_proj = Linear(dim, dim, rng)

    def __call__(self, queries: Tensor, patches: Tensor, bias: np.ndarray | None = None,
                 scaled: bool = True, key_pos: Tensor | None = None) -> tuple[Tensor, Tensor]:
        q = split_heads(self.query_proj(queries), self.heads)
        k = split_heads(self.key_proj(patches if key_pos is None else patches + key_pos), self.heads)
        v = split_heads(self.value_proj(patches), self.heads)
        if bias is not None:
            bias = np.expand_dims(bias, -3)  # broadcast over heads
        scale = 1.0 / math.sqrt(q.shape[-1]) if scaled else 1.0
        out, attn = attend(q, k, v, bias=bias, scale=scale)
        return merge_heads(out), attn


class DecoderLayer(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        self.norm_sa = LayerNorm(cfg.dim)
        self.self_attn = MultiHeadSelfAttention(cfg.dim, cfg.heads, rng)
        self.cross_attn = CrossAttention(cfg.dim, cfg.heads, rng)
        self.norm_ffn = LayerNorm(cfg.dim)
        self.ffn = FeedForward(cfg.dim, cfg.ffn_dim, rng)

    def self_attention(self, tokens: Tensor) -> Tensor:
        return tokens + self.self_attn(self.norm_sa(tokens))

    def cross(self, queries: Tensor, patches: Tensor, bias=None, scaled=True,
              key_pos: Tensor | None = None) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (layer output, raw attention output X, attention weights).

        With ``Y = queries + X`` the output is ``Y + FFN(LN(Y))``.
        """
        x, attn = self.cross_attn(queries, patches, bias, scaled, key_pos)
        y = queries + x
        return y + self.ffn(self.norm_ffn(y)), x, attn


class TSDDecoder(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.queries = param(rng.normal(0.0, 1.0, size=(cfg.parts, cfg.dim)))
        self.layers = [DecoderLayer(cfg, rng) for _ in range(cfg.layers)]
        self.visibility = Linear(cfg.dim, 1, rng)
        self.key_pos = (param(trunc_normal(rng, (cfg.key_positions, cfg.dim), cfg.key_pos_std))
                        if cfg.key_positions else None)

    # -- individual stages -------------------------------------------------

    def query_self_attention(self, global_feat: Tensor, queries: Tensor | None = None,
                             layer: int = 0) -> tuple[Tensor, Tensor]:
        """Self-attention over the sequence [F_g, q_1..q_P]; returns (q_g, refined queries)."""
        queries = self.queries if queries is None else queries
        batched = global_feat.ndim == 2
        g = global_feat.reshape(global_feat.shape[0], 1, -1) if batched else global_feat.reshape(1, -1)
        if batched and queries.ndim == 2:
            queries = queries + Tensor(np.zeros((global_feat.shape[0],) + queries.shape))
        tokens = self.layers[layer].self_attention(concat([g, queries], axis=-2))
        return tokens[..., 0, :], tokens[..., 1:, :]

    def student_cross_attention(self, queries: Tensor, patches: Tensor, layer: int = 0):
        return self.layers[layer].cross(queries, patches, key_pos=self.key_pos)

    def teacher_masked_cross_attention(self, queries: Tensor, patches: Tensor, mask: np.ndarray,
                                       layer: int = 0, allow_empty: bool = True):
        bias, _ = mask_bias(mask, allow_empty)
        return self.layers[layer].cross(queries, patches, bias, self.cfg.scale_teacher, self.key_pos)

    # -- full pass ---------------------------------------------------------

    def _branch(self, global_feat, first_queries, patches, bias, scaled):
        q = first_queries
        attn = None
        for i, layer in enumerate(self.layers):
            if i > 0:
                _, q = self.query_self_attention(global_feat, q, layer=i)
            q, _, attn = layer.cross(q, patches, bias, scaled, self.key_pos)
        b = q.shape[0]
        return DecoderOutput(q, q.reshape(b, -1), attn.data)

    def __call__(self, global_feat: Tensor, patches: Tensor, mask: np.ndarray | None = None,
                 allow_empty: bool = True) -> tuple[DecoderOutput, DecoderOutput | None]:
        """Run the student and (when ``mask`` is given) the teacher on batched inputs.

        ``global_feat`` is [B, D], ``patches`` [B, N, D], ``mask`` [B, P, N].
        The first self-attention stage is shared by both branches.
        """
        _, q = self.query_self_attention(global_feat, layer=0)
        student = self._branch(global_feat, q, patches, None, True)
        teacher = None
        if mask is not None:
            bias, _ = mask_bias(mask, allow_empty)
            teacher = self._branch(global_feat, q, patches, bias, self.cfg.scale_teacher)
        return student, teacher

    def predict_visibility(self, parts: Tensor) -> Tensor:
        """Per-part visibility probability [B, P] from student part features."""
        logits = self.visibility(parts)
        return sigmoid(logits.reshape(logits.shape[:-1]))


def tsd_forward(decoder: TSDDecoder, enc, mask: np.ndarray | None):
    return decoder(enc.global_, enc.patches, mask)
