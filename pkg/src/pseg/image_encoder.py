"""ViT-style image encoder: patch embedding, windowed/global blocks, conv neck."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import Attention, Conv2d, LayerNorm, LayerNorm2d, MLP, Module
from .numerics import ops


@dataclass
class EncoderConfig:
    input_size: int = 128
    patch_size: int = 16
    embed_dim: int = 64
    num_blocks: int = 8
    num_heads: int = 4
    window_size: int = 4
    global_block_indices: tuple = (1, 3, 5, 7)
    neck_channels: int = 32

    @property
    def grid(self):
        return self.input_size // self.patch_size

    def validate(self):
        if self.input_size % self.patch_size:
            raise ConfigError(f"input_size {self.input_size} not divisible by patch_size {self.patch_size}")
        if self.grid % self.window_size:
            raise ConfigError(f"grid side {self.grid} not divisible by window_size {self.window_size}")
        idx = sorted(self.global_block_indices)
        if any(i < 0 or i >= self.num_blocks for i in idx):
            raise ConfigError(f"global_block_indices {idx} outside [0, {self.num_blocks})")
        steps = {b - a for a, b in zip(idx, idx[1:])}
        if len(steps) > 1:
            raise ConfigError(f"global blocks {idx} are not equidistant")
        if self.embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be divisible by num_heads")
        return self


@dataclass
class ImageEmbedding:
    """Encoder output: ``grid`` is a (B, G, G, C) tensor, ``pe_grid`` a (G, G, C) array."""

    grid: object
    pe_grid: np.ndarray = field(repr=False)

    @property
    def side(self):
        return self.grid.shape[1]


def window_partition(x, w):
    """(B, G, G, D) -> (B * (G/w)^2, w*w, D)."""
    B, G, _, D = x.shape
    n = G // w
    x = ops.reshape(x, (B, n, w, n, w, D))
    x = ops.transpose(x, (0, 1, 3, 2, 4, 5))
    return ops.reshape(x, (B * n * n, w * w, D))


def window_unpartition(x, w, B, G):
    n = G // w
    D = x.shape[-1]
    x = ops.reshape(x, (B, n, n, w, w, D))
    x = ops.transpose(x, (0, 1, 3, 2, 4, 5))
    return ops.reshape(x, (B, G, G, D))


class EncoderBlock(Module):
    def __init__(self, dim, num_heads, window_size, rng):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, num_heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP([dim, 4 * dim, dim], rng, activation=ops.gelu)
        self.window_size = window_size  # 0 means global attention

    def __call__(self, x):
        B, G, _, D = x.shape
        h = self.norm1(x)
        if self.window_size:
            h = window_partition(h, self.window_size)
            h = self.attn(h, h, h)
            h = window_unpartition(h, self.window_size, B, G)
        else:
            h = ops.reshape(h, (B, G * G, D))
            h = ops.reshape(self.attn(h, h, h), (B, G, G, D))
        x = x + h
        return x + self.mlp(self.norm2(x))


class ImageEncoder(Module):
    def __init__(self, config: EncoderConfig, rng):
        self.config = config.validate()
        c = config
        self.patch_embed = Conv2d(3, c.embed_dim, c.patch_size, rng, stride=c.patch_size)
        self.blocks = [
            EncoderBlock(c.embed_dim, c.num_heads,
                         0 if i in c.global_block_indices else c.window_size, rng)
            for i in range(c.num_blocks)
        ]
        self.neck_conv1 = Conv2d(c.embed_dim, c.neck_channels, 1, rng, bias=False)
        self.neck_norm1 = LayerNorm2d(c.neck_channels)
        self.neck_conv2 = Conv2d(c.neck_channels, c.neck_channels, 3, rng, padding=1, bias=False)
        self.neck_norm2 = LayerNorm2d(c.neck_channels)

    def patch_embed_tokens(self, images):
        """images: (B, H, W, 3) in [0, 1] -> (B, G, G, embed_dim)."""
        s = self.config.input_size
        if images.ndim != 4 or images.shape[1:] != (s, s, 3):
            raise ShapeError(f"expected images of shape (B, {s}, {s}, 3), got {images.shape}")
        x = ops.transpose(images, (0, 3, 1, 2))
        return ops.transpose(self.patch_embed(x), (0, 2, 3, 1))

    def block(self, tokens, index):
        if not 0 <= index < len(self.blocks):
            raise IndexError(f"block index {index} out of range")
        return self.blocks[index](tokens)

    def neck(self, tokens):
        x = ops.transpose(tokens, (0, 3, 1, 2))
        x = self.neck_norm1(self.neck_conv1(x))
        x = self.neck_norm2(self.neck_conv2(x))
        return ops.transpose(x, (0, 2, 3, 1))

    def __call__(self, images):
        x = self.patch_embed_tokens(images)
        for blk in self.blocks:
            x = blk(x)
        return self.neck(x)


def encode_image(images, encoder: ImageEncoder, pe_grid) -> ImageEmbedding:
    """Run the encoder on a (B, H, W, 3) batch and attach the positional grid."""
    images = ops.as_tensor(images)
    if images.ndim == 3:
        images = ops.reshape(images, (1,) + images.shape)
    return ImageEmbedding(encoder(images), pe_grid)
