"""Training-time augmentation that uses nothing but the training images.

The training domain photographs every tongue centred on a plain dark
backdrop, so a model can separate tongue from background by brightness alone
and ignore its prompt. An augmented view rescales and moves the tongue (image
and mask together), swaps the background for a random smooth field that may
hold tongue-tinted patches touching the tongue, scatters unlabelled blobs in
the tongue's own colour around it and applies a global gain and bias. Prompted batches may also carry a second, unlabelled copy of
the tongue, which only the prompt can tell apart from the target. None of
this draws on any evaluation domain's generator.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from . import _kernels as K


def _field(rng, S, cells):
    return K.bilinear_resize(rng.standard_normal((cells, cells, 3)), S, S)


def random_background(rng, S):
    """Smooth random colour field in [0, 1], sometimes with flat rectangles."""
    bg = rng.uniform(0.05, 0.85, 3) + rng.uniform(0.0, 0.2) * _field(rng, S, int(rng.integers(2, 6)))
    bg += rng.uniform(0.0, 0.08) * _field(rng, S, int(rng.integers(8, 24)))
    ramp = np.linspace(-1, 1, S)
    bg += rng.uniform(-0.1, 0.1) * (ramp[:, None, None] if rng.random() < 0.5 else ramp[None, :, None])
    for _ in range(int(rng.integers(0, 6))):
        h, w = (rng.uniform(0.08, 0.3, 2) * S).astype(int) + 1
        y, x = rng.integers(0, S - h), rng.integers(0, S - w)
        bg[y:y + h, x:x + w] = rng.uniform(0.05, 0.95, 3) + rng.normal(0, 0.02, (h, w, 3))
    return bg + rng.normal(0, 0.015, (S, S, 3))


def _lookalikes(bg, colour, rng, n):
    """Flat tongue-tinted rectangles anywhere in the background, free to touch it."""
    S = bg.shape[0]
    for _ in range(n):
        h, w = (rng.uniform(0.1, 0.4, 2) * S).astype(int) + 1
        y, x = rng.integers(0, S - h), rng.integers(0, S - w)
        bg[y:y + h, x:x + w] = colour * rng.uniform(0.75, 1.25, 3) + rng.normal(0, 0.02, (h, w, 3))
    return bg


def _blobs(img, fg, rng, n):
    """Paint ``n`` ellipses in the tongue's colour that never touch the tongue."""
    S = img.shape[0]
    colour = img[fg].mean(axis=0)
    yy, xx = np.mgrid[0:S, 0:S] + 0.5
    grown = fg.copy()  # one-pixel margin keeps the blobs off the mask boundary
    grown[1:] |= fg[:-1]
    grown[:-1] |= fg[1:]
    grown[:, 1:] |= fg[:, :-1]
    grown[:, :-1] |= fg[:, 1:]
    placed = 0
    for _ in range(50 * n):
        if placed == n:
            break
        ry, rx = rng.uniform(0.03, 0.1, 2) * S
        cy, cx = rng.uniform(0, S, 2)
        t = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(t) + dy * np.sin(t)) / rx
        v = (-dx * np.sin(t) + dy * np.cos(t)) / ry
        blob = u * u + v * v <= 1.0
        if not blob.any() or (blob & grown).any():
            continue
        tint = colour * rng.uniform(0.85, 1.15, 3)
        shade = 1.0 - 0.25 * np.clip(u * u + v * v, 0, 1)
        img[blob] = (tint * shade[..., None])[blob] * (1 + 0.08 * rng.standard_normal((blob.sum(), 1)))
        placed += 1
    return img


def random_placement(image, mask, rng, scale=(0.7, 1.3)):
    """Rescale the tongue by a random factor and put its box anywhere in frame."""
    S = image.shape[0]
    ys, xs = np.nonzero(mask)
    y0, x0 = ys.min(), xs.min()
    h, w = ys.max() - y0 + 1, xs.max() - x0 + 1
    s = min(rng.uniform(*scale), (S - 1) / h, (S - 1) / w)
    ny0, nx0 = rng.uniform(0, S - h * s), rng.uniform(0, S - w * s)
    # output index o samples input index y0 + (o - ny0) / s
    matrix, offset = np.diag([1 / s, 1 / s]), [y0 - ny0 / s, x0 - nx0 / s]
    moved = ndimage.affine_transform(mask.astype(np.float64), matrix, offset, order=0)
    if not moved.any():
        return image, mask
    chans = [ndimage.affine_transform(image[..., c], matrix, offset, order=1, mode="nearest")
             for c in range(3)]
    return np.stack(chans, axis=-1), moved.astype(mask.dtype)


def _decoy(out, image, mask, fg, rng, tries=30):
    """Paste a second, unlabelled copy of the tongue that keeps clear of the first."""
    near = ndimage.binary_dilation(fg, iterations=2)
    for _ in range(tries):
        d_img, d_mask = random_placement(image, mask, rng, scale=(0.5, 0.9))
        d = d_mask.astype(bool)
        if not (d & near).any():
            out[d] = d_img[d] * rng.uniform(0.85, 1.15, 3)
            return out
    return out


def augment_image(image, mask, rng, decoy=False):
    """One augmented (image, mask) pair from an (S, S, 3) image in [0, 1].

    With ``decoy`` a second copy of the tongue may appear elsewhere, unlabelled;
    only a prompt can then tell the target apart, so use it for prompted batches.
    """
    mask = np.asarray(mask)
    src_image, src_mask = image, mask
    image, mask = random_placement(image, mask, rng)
    fg = mask.astype(bool)
    S = image.shape[0]
    bg = random_background(rng, S)
    if rng.random() < 0.5:
        _lookalikes(bg, image[fg].mean(axis=0), rng, int(rng.integers(1, 4)))
    out = np.where(fg[..., None], image, bg)
    out = _blobs(out, fg, rng, int(rng.integers(0, 4)))
    if decoy and rng.random() < 0.5:
        out = _decoy(out, src_image, src_mask, fg, rng)
    gain = rng.uniform(0.7, 1.3) * rng.uniform(0.93, 1.07, 3)
    out = np.clip(out * gain + rng.uniform(-0.1, 0.1), 0.0, 1.0)
    return np.round(out * 255) / 255, mask  # stay on the 8-bit grid of decoded images


def augment_batch(images, masks, rng, p, decoy=False):
    """Replace each (image, mask) pair by an augmented one with probability ``p``."""
    if p <= 0:
        return images, masks
    out, out_masks = np.array(images, dtype=np.float64), np.array(masks)
    for i in range(len(out)):
        if rng.random() < p:
            out[i], out_masks[i] = augment_image(out[i], out_masks[i], rng, decoy)
    return out, out_masks


__all__ = ["random_background", "random_placement", "augment_image", "augment_batch"]
