"""Two-layer two-way transformer mask decoder with dynamic mask prediction."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels as K
from .errors import ConfigError, ShapeError
from .nn import Attention, ConvTranspose2d, LayerNorm, LayerNorm2d, MLP, Module
from .numerics import Tensor, ops
from .prompt_encoder import fuse_dense

NUM_LAYERS = 2
DROPOUT_RATE = 0.1


@dataclass
class DecoderConfig:
    token_dim: int = 32
    num_layers: int = NUM_LAYERS
    num_heads: int = 2
    mlp_hidden: Optional[int] = None
    dropout_rate: float = DROPOUT_RATE
    upscale_factor: int = 4

    def validate(self):
        if self.num_layers != NUM_LAYERS:
            raise ConfigError(f"the decoder has exactly {NUM_LAYERS} layers, got {self.num_layers}")
        if self.dropout_rate != DROPOUT_RATE:
            raise ConfigError(f"dropout rate is fixed at {DROPOUT_RATE}, got {self.dropout_rate}")
        if self.upscale_factor != 4:
            raise ConfigError("upscale factor is fixed at 4")
        if self.token_dim % 4 or self.token_dim % self.num_heads:
            raise ConfigError("token_dim must be divisible by 4 and by num_heads")
        return self

    @property
    def hidden(self):
        return self.mlp_hidden or 4 * self.token_dim


class TwoWayLayer(Module):
    def __init__(self, dim, num_heads, hidden, rng):
        self.self_attn = Attention(dim, num_heads, rng)
        self.norm1 = LayerNorm(dim)
        self.cross_token_to_image = Attention(dim, num_heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP([dim, hidden, dim], rng)
        self.norm3 = LayerNorm(dim)
        self.cross_image_to_token = Attention(dim, num_heads, rng)
        self.norm4 = LayerNorm(dim)

    def __call__(self, tokens, image, original_tokens, pe, train=False, rng=None, p=DROPOUT_RATE):
        """tokens/original_tokens: (B, T, C); image: (B, N, C); pe: (N, C)."""
        if tokens.shape[-1] != image.shape[-1] or original_tokens.shape != tokens.shape:
            raise ShapeError(f"width mismatch: tokens {tokens.shape}, image {image.shape}")
        drop = (lambda t: ops.dropout(t, p, train, rng))

        q = tokens + original_tokens
        tokens = self.norm1(tokens + drop(self.self_attn(q, q, tokens)))

        q = tokens + original_tokens
        k = image + pe
        tokens = self.norm2(tokens + drop(self.cross_token_to_image(q, k, image)))

        tokens = self.norm3(tokens + drop(self.mlp(tokens)))

        q = image + pe
        k = tokens + original_tokens
        image = self.norm4(image + drop(self.cross_image_to_token(q, k, tokens)))
        return tokens, image


class MaskDecoder(Module):
    def __init__(self, config: DecoderConfig, rng):
        self.config = config.validate()
        C = config.token_dim
        self.output_token = Tensor(rng.normal(0, 1, C), requires_grad=True)
        self.layers = [TwoWayLayer(C, config.num_heads, config.hidden, rng)
                       for _ in range(config.num_layers)]
        self.upscale1 = ConvTranspose2d(C, C // 2, 2, rng, stride=2)
        self.upscale_norm1 = LayerNorm2d(C // 2)
        self.upscale2 = ConvTranspose2d(C // 2, C // 4, 2, rng, stride=2)
        self.upscale_norm2 = LayerNorm2d(C // 4)
        self.hyper_mlp = MLP([C, C, C, C // 4], rng)

    def insert_output_token(self, prompt_tokens, batch):
        """Prepend the learned output token; ``prompt_tokens`` may be None."""
        C = self.config.token_dim
        out = ops.broadcast_to(ops.reshape(self.output_token, (1, 1, C)), (batch, 1, C))
        if prompt_tokens is None:
            return out
        if prompt_tokens.shape[-1] != C:
            raise ShapeError(f"prompt token width {prompt_tokens.shape[-1]} != {C}")
        return ops.concat([out, prompt_tokens], axis=1)

    def predict_mask(self, tokens, image, side):
        """Upscale the image grid 4x and dot each pixel with the output-token hyperplane."""
        B, N, C = image.shape
        x = ops.transpose(ops.reshape(image, (B, side, side, C)), (0, 3, 1, 2))
        x = self.upscale_norm1(ops.gelu(self.upscale1(x)))
        x = self.upscale_norm2(ops.gelu(self.upscale2(x)))
        hyper = self.hyper_mlp(tokens[:, 0, :])
        return mask_logits(x, hyper)

    def __call__(self, embedding_grid, pe_grid, sparse, dense, train=False, rng=None):
        B, G, _, C = embedding_grid.shape
        grid = fuse_dense(embedding_grid, dense)
        image = ops.reshape(grid, (B, G * G, C))
        pe = np.asarray(pe_grid).reshape(G * G, C)
        tokens = self.insert_output_token(sparse, B)
        original = tokens
        for layer in self.layers:
            tokens, image = layer(tokens, image, original, pe, train, rng, self.config.dropout_rate)
        return self.predict_mask(tokens, image, G)


def mask_logits(features, hyper):
    """features: (B, c, H, W); hyper: (B, c) -> (B, H, W) logits."""
    B, c, H, W = features.shape
    flat = ops.reshape(features, (B, c, H * W))
    out = ops.matmul(ops.reshape(hyper, (B, 1, c)), flat)
    return ops.reshape(out, (B, H, W))


def decode(embedding, prompts, prompt_encoder, decoder, train=False, rng=None):
    """Image embedding + per-image PromptSets -> (B, 4G, 4G) mask logits."""
    G = embedding.side
    sparse = prompt_encoder.encode_sparse(prompts)
    dense = prompt_encoder.dense(prompts, G)
    return decoder(embedding.grid, embedding.pe_grid, sparse, dense, train, rng)


def binarize(logits, image_size):
    """Bilinear upsample logits to ``image_size`` and threshold strictly above 0."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    if arr.ndim == 2:
        return (K.bilinear_resize(arr, image_size, image_size) > 0).astype(np.uint8)
    up = K.bilinear_resize(np.moveaxis(arr, 0, -1), image_size, image_size)
    return (np.moveaxis(up, -1, 0) > 0).astype(np.uint8)
