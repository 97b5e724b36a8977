"""Automatic and ground-truth prompt construction.

Holds the single-object anchor-free box detector, the tiny segmenter whose
predicted mask is turned into a box, and the helpers that derive box and
point prompts from a ground-truth mask.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import EmptyMaskError, NumericError
from .nn import Conv2d, Module
from .numerics import no_tape, ops
from .prompt_encoder import FOREGROUND, BoxPrompt, PointPrompt
from .training import train_loop

MIN_EXTENT = 1e-6


class GeneratorKind(str, enum.Enum):
    GT_BOX = "gt_box"
    GT_POINTS = "gt_points"
    DETECTOR_BOX = "detector_box"
    SEGMENTER_BOX = "segmenter_box"
    NONE = "none"


# -- ground-truth prompts ----------------------------------------------------


def box_from_mask(mask) -> BoxPrompt:
    """Tight normalised box around the foreground of a binary mask."""
    mask = np.asarray(mask)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        raise EmptyMaskError("mask has no foreground pixels")
    cols = np.flatnonzero(mask.any(axis=0))
    H, W = mask.shape
    return BoxPrompt(cols[0] / W, rows[0] / H, (cols[-1] + 1) / W, (rows[-1] + 1) / H)


def sample_points(mask, k, rng):
    """``k`` distinct foreground pixel centres, uniformly without replacement."""
    mask = np.asarray(mask)
    fg = np.argwhere(mask > 0)
    if len(fg) < k:
        raise EmptyMaskError(f"need {k} foreground pixels, mask has {len(fg)}")
    H, W = mask.shape
    picks = fg[rng.choice(len(fg), size=k, replace=False)]
    return [PointPrompt((c + 0.5) / W, (r + 0.5) / H, FOREGROUND) for r, c in picks]


# -- detector ----------------------------------------------------------------


@dataclass
class DetectorConfig:
    input_size: int = 128
    channels: tuple = (8, 16, 32, 64)
    box_loss_weight: float = 1.0

    @property
    def grid(self):
        return self.input_size // 2 ** len(self.channels)


@dataclass(frozen=True)
class Detection:
    box: BoxPrompt
    objectness: float


class Detector(Module):
    """Stride-16 conv backbone with objectness and (l, t, r, b) heads."""

    def __init__(self, config: DetectorConfig, rng):
        self.config = config
        self.stages = []
        c_in = 3
        for c in config.channels:
            self.stages.append(Conv2d(c_in, c, 3, rng, stride=2, padding=1))
            self.stages.append(Conv2d(c, c, 3, rng, stride=1, padding=1))
            c_in = c
        self.objectness_head = Conv2d(c_in, 1, 1, rng)
        self.box_head = Conv2d(c_in, 4, 1, rng)

    def __call__(self, images):
        """images (B, H, W, 3) in [0, 1] -> objectness logits (B, D, D), raw box (B, 4, D, D)."""
        x = ops.transpose(ops.as_tensor(images), (0, 3, 1, 2)) - 0.5
        for conv in self.stages:
            x = ops.relu(conv(x))
        obj = self.objectness_head(x)
        B, _, D, _ = obj.shape
        return ops.reshape(obj, (B, D, D)), self.box_head(x)


def positive_cell(box: BoxPrompt, grid):
    """Grid cell (row, col) holding the box centre."""
    cx = min((box.x0 + box.x1) / 2, 1 - 1e-9)
    cy = min((box.y0 + box.y1) / 2, 1 - 1e-9)
    return int(np.floor(cy * grid)), int(np.floor(cx * grid))


def _cell_extents(raw, D):
    """Softplus offsets in normalised units, floored to keep boxes non-degenerate."""
    return (np.logaddexp(0.0, raw) + MIN_EXTENT) / D


def decode_box(raw_ltrb, row, col, grid) -> BoxPrompt:
    l, t, r, b = _cell_extents(np.asarray(raw_ltrb, dtype=np.float64), grid)
    cx, cy = (col + 0.5) / grid, (row + 0.5) / grid
    return BoxPrompt(max(0.0, cx - l), max(0.0, cy - t), min(1.0, cx + r), min(1.0, cy + b))


def detect(images, detector: Detector):
    """Top-1 detection per image; accepts (H, W, 3) or a (B, H, W, 3) batch."""
    arr = np.asarray(images, dtype=np.float64)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    with no_tape():
        obj, raw = detector(arr)
    obj, raw = obj.data, raw.data
    if not (np.isfinite(obj).all() and np.isfinite(raw).all()):
        raise NumericError("detector produced non-finite scores")
    D = obj.shape[-1]
    out = []
    for b in range(len(arr)):
        row, col = np.unravel_index(int(np.argmax(obj[b])), (D, D))
        score = float(expit(obj[b, row, col]))
        out.append(Detection(decode_box(raw[b, :, row, col], row, col, D), score))
    return out[0] if single else out


def detector_loss(detector: Detector, images, boxes, weight=1.0):
    """Objectness BCE over the grid + ``weight`` * (1 - IoU) at the positive cell."""
    obj, raw = detector(images)
    B, D, _ = obj.shape
    cells = np.array([positive_cell(b, D) for b in boxes])
    target = np.zeros((B, D, D))
    target[np.arange(B), cells[:, 0], cells[:, 1]] = 1.0
    cls_loss = ops.bce_with_logits(obj, target)

    ltrb = raw[np.arange(B), :, cells[:, 0], cells[:, 1]]
    dist = (ops.softplus(ltrb) + MIN_EXTENT) * (1.0 / D)
    gt = np.array([b.as_array() for b in boxes])
    cx = (cells[:, 1] + 0.5) / D
    cy = (cells[:, 0] + 0.5) / D
    gt_dist = np.stack([cx - gt[:, 0], cy - gt[:, 1], gt[:, 2] - cx, gt[:, 3] - cy], axis=1)
    overlap = ops.minimum(dist, gt_dist)
    iw = ops.relu(overlap[:, 0] + overlap[:, 2])
    ih = ops.relu(overlap[:, 1] + overlap[:, 3])
    inter = iw * ih
    area_p = (dist[:, 0] + dist[:, 2]) * (dist[:, 1] + dist[:, 3])
    area_g = (gt_dist[:, 0] + gt_dist[:, 2]) * (gt_dist[:, 1] + gt_dist[:, 3])
    iou = inter / (area_p + area_g - inter)
    return cls_loss + weight * ops.mean(1.0 - iou)


def train_detector(images, boxes, config: DetectorConfig, *, epochs=100, batch_size=16,
                   lr=1e-4, seed=0, val_images=None, val_boxes=None, augment=None):
    """Fit a detector; returns (detector, history) at minimum validation loss.

    ``augment(indices, rng)``, when given, returns (images, masks) for the
    batch in place of ``images[indices]``; boxes then come from those masks.
    """
    if len(images) == 0:
        raise ValueError("train_detector: empty training set")
    rng = np.random.default_rng([seed, 1])
    det = Detector(config, rng)
    if val_images is None or len(val_images) == 0:
        val_images, val_boxes = images, boxes

    def batch_loss(idx, rng):
        if augment is None:
            return detector_loss(det, images[idx], [boxes[i] for i in idx], config.box_loss_weight)
        batch, masks = augment(idx, rng)
        return detector_loss(det, batch, [box_from_mask(m) for m in masks], config.box_loss_weight)

    def validate():
        with no_tape():
            return detector_loss(det, val_images, val_boxes, config.box_loss_weight).item()

    history = train_loop(det.parameters(), batch_loss, len(images), epochs=epochs,
                         batch_size=batch_size, lr=lr, seed=seed, validate=validate,
                         higher_is_better=False, label="detector")
    return det, history


# -- segmentation-derived boxes ---------------------------------------------


@dataclass
class SegmenterConfig:
    channels: tuple = (8, 8)


class Segmenter(Module):
    """Three same-resolution 3x3 convs producing a foreground logit map."""

    def __init__(self, config: SegmenterConfig, rng):
        self.config = config
        c1, c2 = config.channels
        self.conv1 = Conv2d(3, c1, 3, rng, padding=1)
        self.conv2 = Conv2d(c1, c2, 3, rng, padding=1)
        self.conv3 = Conv2d(c2, 1, 3, rng, padding=1)

    def __call__(self, images):
        x = ops.transpose(ops.as_tensor(images), (0, 3, 1, 2)) - 0.5
        x = ops.relu(self.conv1(x))
        x = ops.relu(self.conv2(x))
        x = self.conv3(x)
        B, _, H, W = x.shape
        return ops.reshape(x, (B, H, W))


def segmenter_masks(images, segmenter: Segmenter, batch_size=32):
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    out = []
    with no_tape():
        for s in range(0, len(arr), batch_size):
            out.append(segmenter(arr[s:s + batch_size]).data > 0.0)
    return np.concatenate(out).astype(np.uint8)


def box_or_full_image(mask) -> BoxPrompt:
    try:
        return box_from_mask(mask)
    except EmptyMaskError:
        return BoxPrompt(0.0, 0.0, 1.0, 1.0)


def segmenter_box_generator(image, segmenter: Segmenter) -> BoxPrompt:
    """Box around the thresholded segmenter output; full image if it is empty."""
    return box_or_full_image(segmenter_masks(image, segmenter)[0])


def train_segmenter(images, masks, config: SegmenterConfig, *, epochs=100, batch_size=8,
                    lr=1e-4, seed=0, val_images=None, val_masks=None, augment=None):
    if len(images) == 0:
        raise ValueError("train_segmenter: empty training set")
    rng = np.random.default_rng([seed, 2])
    seg = Segmenter(config, rng)
    masks = np.asarray(masks, dtype=np.float64)
    if val_images is None or len(val_images) == 0:
        val_images, val_masks = images, masks

    def batch_loss(idx, rng):
        if augment is None:
            return ops.bce_with_logits(seg(images[idx]), masks[idx])
        batch, batch_masks = augment(idx, rng)
        return ops.bce_with_logits(seg(batch), np.asarray(batch_masks, dtype=np.float64))

    def validate():
        with no_tape():
            return ops.bce_with_logits(seg(val_images), np.asarray(val_masks, float)).item()

    history = train_loop(seg.parameters(), batch_loss, len(images), epochs=epochs,
                         batch_size=batch_size, lr=lr, seed=seed, validate=validate,
                         higher_is_better=False, label="segmenter")
    return seg, history

