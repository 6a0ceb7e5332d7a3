"""Small ViT-style image encoder producing a class-token feature and patch features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .nn import Block, LayerNorm, Linear, Module, param, trunc_normal
from .tensor import Tensor, concat


@dataclass
class EncoderConfig:
    image_h: int = 256
    image_w: int = 128
    channels: int = 3
    patch_size: int = 16
    stride: int = 16
    depth: int = 4
    heads: int = 4
    dim: int = 64
    ffn_dim: int = 128
    pos_init_std: float = 0.02

    def __post_init__(self):
        for name in ("image_h", "image_w", "channels", "patch_size", "stride", "depth", "heads", "dim", "ffn_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        # Overlapping strides need not tile the image exactly; trailing pixels
        # that do not fill a whole window are dropped (grid = floor(...) + 1).
        if self.patch_size > min(self.image_h, self.image_w):
            raise ValueError(f"patch_size {self.patch_size} exceeds the {self.image_h}x{self.image_w} image")
        if self.dim % self.heads:
            raise ValueError("heads must divide dim")

    @property
    def grid(self) -> tuple[int, int]:
        return ((self.image_h - self.patch_size) // self.stride + 1,
                (self.image_w - self.patch_size) // self.stride + 1)

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size


@dataclass
class EncoderOutput:
    global_: Tensor   # [B, D]  class-token feature
    patches: Tensor   # [B, N, D]
    grid: tuple[int, int]


def extract_patches(images: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """[B, C, H, W] -> [B, N, C*p*p], patches in row-major grid order."""
    b, c, h, w = images.shape
    if (c, h, w) != (cfg.channels, cfg.image_h, cfg.image_w):
        raise ValueError(f"image shape {(c, h, w)} does not match config "
                         f"{(cfg.channels, cfg.image_h, cfg.image_w)}")
    p, s = cfg.patch_size, cfg.stride
    win = sliding_window_view(images, (p, p), axis=(2, 3))[:, :, ::s, ::s]  # B,C,gh,gw,p,p
    gh, gw = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b, gh * gw, c * p * p)


class ViTEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.patch_embed = Linear(cfg.patch_dim, cfg.dim, rng)
        self.cls_token = param(trunc_normal(rng, (1, 1, cfg.dim)))
        self.pos_embed = param(trunc_normal(rng, (1, cfg.num_patches + 1, cfg.dim), cfg.pos_init_std))
        self.blocks = [Block(cfg.dim, cfg.heads, cfg.ffn_dim, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.dim)

    def tokens(self, patch_vectors: Tensor, pos_embed: Tensor | None = None) -> Tensor:
        """Run the transformer over flattened patch vectors [B, N, C*p*p] -> [B, N+1, D]."""
        pos_embed = self.pos_embed if pos_embed is None else pos_embed
        b = patch_vectors.shape[0]
        x = self.patch_embed(patch_vectors)
        cls = self.cls_token + Tensor(np.zeros((b, 1, self.cfg.dim)))
        x = concat([cls, x], axis=1) + pos_embed
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    def __call__(self, images) -> EncoderOutput:
        arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
        single = arr.ndim == 3
        if single:
            arr = arr[None]
        x = self.tokens(Tensor(extract_patches(arr, self.cfg)))
        out = EncoderOutput(x[:, 0], x[:, 1:], self.cfg.grid)
        if single:
            out = EncoderOutput(out.global_[0], out.patches[0], out.grid)
        return out


def encode(image, encoder: ViTEncoder) -> EncoderOutput:
    return encoder(image)
