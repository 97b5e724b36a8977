"""Prompt types and the prompt encoder (points, boxes, dense masks)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import BoxError, ShapeError
from .nn import Conv2d, LayerNorm2d, Module
from .numerics import Tensor, ops

FOREGROUND = 1
BACKGROUND = 0


@dataclass(frozen=True)
class PointPrompt:
    x: float
    y: float
    label: int = FOREGROUND

    def __post_init__(self):
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise ValueError(f"point ({self.x}, {self.y}) outside the unit square")
        if self.label not in (FOREGROUND, BACKGROUND):
            raise ValueError(f"point label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class BoxPrompt:
    """Normalised corners: top-left (x0, y0), bottom-right (x1, y1)."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        vals = (self.x0, self.y0, self.x1, self.y1)
        if not all(np.isfinite(vals)):
            raise BoxError(f"non-finite box {vals}")
        if not (0.0 <= self.x0 < self.x1 <= 1.0 and 0.0 <= self.y0 < self.y1 <= 1.0):
            raise BoxError(f"invalid box {vals}: need 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1")

    def as_array(self):
        return np.array([self.x0, self.y0, self.x1, self.y1])

    def iou(self, other: "BoxPrompt"):
        iw = max(0.0, min(self.x1, other.x1) - max(self.x0, other.x0))
        ih = max(0.0, min(self.y1, other.y1) - max(self.y0, other.y0))
        inter = iw * ih
        union = ((self.x1 - self.x0) * (self.y1 - self.y0)
                 + (other.x1 - other.x0) * (other.y1 - other.y0) - inter)
        return inter / union


@dataclass
class MaskPrompt:
    mask: np.ndarray  # (input_size/4, input_size/4) soft mask


@dataclass
class PromptSet:
    points: list = field(default_factory=list)
    box: Optional[BoxPrompt] = None
    mask: Optional[MaskPrompt] = None

    @property
    def num_tokens(self):
        return len(self.points) + (2 if self.box is not None else 0)

    def structure(self):
        return (len(self.points), self.box is not None, self.mask is not None)


class PositionalEncoder:
    """Random Fourier features of normalised (x, y) coordinates."""

    def __init__(self, dim, seed=0, scale=1.0):
        if dim % 2:
            raise ValueError("positional encoding dimension must be even")
        self.dim = dim
        self.freqs = np.random.default_rng(seed).normal(0.0, scale, (dim // 2, 2))

    def __call__(self, coords):
        """coords: (..., 2) as (x, y) -> (..., dim)."""
        proj = 2.0 * np.pi * (np.asarray(coords, dtype=np.float64) @ self.freqs.T)
        return np.concatenate([np.sin(proj), np.cos(proj)], axis=-1)

    def grid(self, side):
        """Encodings at cell centres ((j + 0.5)/G, (i + 0.5)/G) -> (G, G, dim)."""
        c = (np.arange(side) + 0.5) / side
        xx, yy = np.meshgrid(c, c)
        return self(np.stack([xx, yy], axis=-1))


@dataclass
class PromptEncoderConfig:
    embed_dim: int = 32
    input_size: int = 128
    mask_channels: tuple = (2, 8)
    pe_seed: int = 0

    @property
    def mask_side(self):
        return self.input_size // 4


class PromptEncoder(Module):
    def __init__(self, config: PromptEncoderConfig, rng):
        self.config = config
        C = config.embed_dim
        c1, c2 = config.mask_channels
        self.pe = PositionalEncoder(C, config.pe_seed)
        self.point_fg = Tensor(rng.normal(0, 1, C), requires_grad=True)
        self.point_bg = Tensor(rng.normal(0, 1, C), requires_grad=True)
        self.box_tl = Tensor(rng.normal(0, 1, C), requires_grad=True)
        self.box_br = Tensor(rng.normal(0, 1, C), requires_grad=True)
        self.no_mask = Tensor(rng.normal(0, 1, C), requires_grad=True)
        self.mask_conv1 = Conv2d(1, c1, 2, rng, stride=2)
        self.mask_norm1 = LayerNorm2d(c1)
        self.mask_conv2 = Conv2d(c1, c2, 2, rng, stride=2)
        self.mask_norm2 = LayerNorm2d(c2)
        self.mask_conv3 = Conv2d(c2, C, 1, rng)

    def pe_grid(self, side):
        return self.pe.grid(side)

    def encode_points(self, coords, labels):
        """coords: (B, k, 2), labels: (B, k) -> (B, k, C) tokens."""
        coords = np.asarray(coords, dtype=np.float64)
        fg = np.asarray(labels, dtype=np.float64)[..., None]
        return self.pe(coords) + fg * self.point_fg + (1.0 - fg) * self.point_bg

    def encode_box(self, boxes):
        """boxes: (B, 4) rows of (x0, y0, x1, y1) -> (B, 2, C) tokens."""
        boxes = np.asarray(boxes, dtype=np.float64)
        if np.any(boxes[:, 0] >= boxes[:, 2]) or np.any(boxes[:, 1] >= boxes[:, 3]):
            raise BoxError("inverted box corners")
        corners = boxes.reshape(-1, 2, 2)
        kinds = ops.reshape(ops.concat([self.box_tl, self.box_br]), (2, -1))
        return self.pe(corners) + kinds

    def encode_mask(self, masks):
        """masks: (B, S, S) with S = input_size/4 -> (B, G, G, C)."""
        masks = ops.as_tensor(masks)
        S = self.config.mask_side
        if masks.ndim != 3 or masks.shape[1:] != (S, S):
            raise ShapeError(f"mask prompt must be (B, {S}, {S}), got {masks.shape}")
        x = ops.reshape(masks, (masks.shape[0], 1, S, S))
        x = self.mask_norm1(ops.gelu(self.mask_conv1(x)))
        x = self.mask_norm2(ops.gelu(self.mask_conv2(x)))
        x = self.mask_conv3(x)
        return ops.transpose(x, (0, 2, 3, 1))

    def encode_sparse(self, prompts):
        """Stack sparse tokens for a batch of PromptSets sharing one structure.

        Returns a (B, T, C) tensor, or ``None`` when T == 0.
        """
        structures = {p.structure()[:2] for p in prompts}
        if len(structures) != 1:
            raise ValueError(f"prompt sets in one batch must share structure, got {structures}")
        n_points, has_box = structures.pop()
        parts = []
        if n_points:
            coords = np.array([[(pt.x, pt.y) for pt in p.points] for p in prompts])
            labels = np.array([[pt.label for pt in p.points] for p in prompts])
            parts.append(self.encode_points(coords, labels))
        if has_box:
            parts.append(self.encode_box(np.stack([p.box.as_array() for p in prompts])))
        if not parts:
            return None
        return parts[0] if len(parts) == 1 else ops.concat(parts, axis=1)

    def dense(self, prompts, side):
        """Dense embedding for the batch: mask path or broadcast no-mask vector."""
        has_mask = {p.mask is not None for p in prompts}
        if len(has_mask) != 1:
            raise ValueError("either every or no prompt set in a batch may carry a mask")
        if has_mask.pop():
            return self.encode_mask(np.stack([p.mask.mask for p in prompts]))
        return ops.reshape(self.no_mask, (1, 1, 1, -1))


def fuse_dense(grid, dense):
    """Element-wise sum of the image embedding grid and a dense prompt embedding."""
    if dense.shape[-1] != grid.shape[-1] or (dense.ndim == 4 and dense.shape[1:3] not in
                                              ((1, 1), tuple(grid.shape[1:3]))):
        raise ShapeError(f"dense embedding {dense.shape} does not fit grid {grid.shape}")
    return grid + dense
