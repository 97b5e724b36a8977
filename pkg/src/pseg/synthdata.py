"""Synthetic tongue-image domains, dataset files, manifests and splits.

Three domains stand in for the evaluation datasets:

* ``A`` - standardised capture: dark backdrop, centred tongue, small jitter.
* ``B`` - shifted capture: lighter booth backdrop, illumination gain/bias,
  wider scale range, off-centre placement.
* ``C`` - in-the-wild: cluttered textured backdrop and 1-3 distractor blobs
  drawn from the tongue colour distribution.

Every sample is rendered from its own RNG substream keyed by
(seed, domain, index), so any subset regenerates byte-identically.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import _kernels as K
from .errors import DataError, EmptyMaskError, MaskDomainError, ParseError
from .pnm import read_pgm, read_pnm, read_ppm, write_pgm, write_ppm
from .prompt_encoder import BoxPrompt
from .prompt_generator import box_from_mask

MANIFEST_NAME = "manifest.tsv"
DEFAULT_SIZES = {"A": 400, "B": 100, "C": 200}


@dataclass(frozen=True)
class DomainSpec:
    id: str
    image_size: int = 128
    center_jitter: float = 6.0
    semi_axis_x: tuple = (24.0, 34.0)
    semi_axis_y: tuple = (28.0, 40.0)
    scale: tuple = (1.0, 1.0)
    rotation_deg: tuple = (-12.0, 12.0)
    top_cut: tuple = (0.6, 0.8)
    tongue_rgb_lo: tuple = (185, 75, 90)
    tongue_rgb_hi: tuple = (235, 125, 145)
    texture: float = 0.08
    background: str = "dark"
    gain: tuple = (1.0, 1.0)
    bias: tuple = (0.0, 0.0)
    distractors: tuple = (0, 0)
    distractor_radius: tuple = (5.0, 10.0)
    max_distractor_overlap: float = 0.2

    def validate(self):
        ranges = [self.semi_axis_x, self.semi_axis_y, self.scale, self.rotation_deg,
                  self.top_cut, self.gain, self.bias, self.distractors, self.distractor_radius]
        vals = [self.image_size, self.center_jitter, self.texture, *self.tongue_rgb_lo,
                *self.tongue_rgb_hi] + [v for r in ranges for v in r]
        if not np.isfinite(vals).all():
            raise ValueError(f"domain {self.id}: non-finite parameter")
        for r in ranges:
            if r[0] > r[1]:
                raise ValueError(f"domain {self.id}: inverted range {r}")
        if self.scale[0] <= 0 or self.semi_axis_x[0] <= 0 or self.semi_axis_y[0] <= 0:
            raise ValueError(f"domain {self.id}: tongue axes must be positive")
        if self.background not in ("dark", "booth", "clutter"):
            raise ValueError(f"domain {self.id}: unknown background {self.background!r}")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        return self

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


DOMAINS = {
    "A": DomainSpec("A"),
    "B": DomainSpec(
        "B", center_jitter=20.0, scale=(0.7, 1.3), rotation_deg=(-20.0, 20.0),
        background="booth", gain=(0.7, 1.25), bias=(-25.0, 20.0),
    ),
    "C": DomainSpec(
        "C", center_jitter=10.0, scale=(0.85, 1.15), rotation_deg=(-20.0, 20.0),
        background="clutter", distractors=(1, 3), distractor_radius=(5.0, 10.0),
    ),
}


def domain_spec(domain_id, image_size=None) -> DomainSpec:
    try:
        spec = DOMAINS[domain_id]
    except KeyError:
        raise ValueError(f"unknown domain {domain_id!r}; choose from {sorted(DOMAINS)}") from None
    return replace(spec, image_size=image_size) if image_size else spec


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    box: BoxPrompt
    domain: str = ""
    index: int = -1
    distractors: int = 0  # blobs drawn; not persisted to disk

    def validate(self, where=""):
        if self.image.shape[:2] != self.mask.shape:
            raise DataError(f"{where}: image {self.image.shape} and mask {self.mask.shape} differ")
        if not self.mask.any():
            raise EmptyMaskError(f"{where}: mask is empty")
        return self


# -- rendering ----------------------------------------------------------------


def _substream(seed, domain_id, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), ord(domain_id[0]), int(index)]))


def _smooth_noise(rng, size, cells, channels=1):
    coarse = rng.standard_normal((cells, cells, channels))
    return K.bilinear_resize(coarse, size, size)


def _ellipse_coords(S, cx, cy, a, b, theta):
    yy, xx = np.mgrid[0:S, 0:S] + 0.5
    dx, dy = xx - cx, yy - cy
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return u, v


def _tongue_colour(spec, rng):
    return rng.uniform(spec.tongue_rgb_lo, spec.tongue_rgb_hi)


def _shade(base, u, v, noise, texture):
    r2 = np.clip(u * u + v * v, 0.0, 1.0)
    shading = (1.0 - 0.25 * r2)[..., None]
    return base * shading * (1.0 + texture * noise)


def _background(spec, rng, S):
    if spec.background == "dark":
        level = rng.uniform(12, 32) + rng.uniform(-4, 4, 3)
        return level + rng.normal(0, 3, (S, S, 3))
    if spec.background == "booth":
        level = rng.uniform(110, 170) + np.array([8.0, 2.0, -6.0]) + rng.uniform(-6, 6, 3)
        ramp = np.linspace(-1, 1, S)[:, None, None] * rng.uniform(-20, 20)
        return level + ramp + rng.normal(0, 4, (S, S, 3))
    # clutter: smooth multi-colour field with a few flat patches on top
    img = 128 + 55 * _smooth_noise(rng, S, 4, 3) + 20 * _smooth_noise(rng, S, 16, 3)
    lo = max(1, round(10 * S / 128))
    hi = min(S - 1, max(lo + 1, round(40 * S / 128)))
    for _ in range(rng.integers(3, 7)):
        h, w = rng.integers(lo, hi, 2)
        y, x = rng.integers(0, S - h), rng.integers(0, S - w)
        img[y:y + h, x:x + w] = rng.uniform(20, 235, 3) + rng.normal(0, 6, (h, w, 3))
    return img


def render(spec: DomainSpec, seed: int, index: int) -> Sample:
    """Draw one sample of ``spec`` from the (seed, domain, index) substream."""
    rng = _substream(seed, spec.id, index)
    S = spec.image_size
    k = S / 128.0
    scale = rng.uniform(*spec.scale) * k
    a = rng.uniform(*spec.semi_axis_x) * scale
    b = rng.uniform(*spec.semi_axis_y) * scale
    theta = np.deg2rad(rng.uniform(*spec.rotation_deg))
    cut = rng.uniform(*spec.top_cut)
    reach = max(a, b) + 2.0
    lo, hi = reach, S - reach
    cx = float(np.clip(S / 2 + rng.uniform(-1, 1) * spec.center_jitter * k, lo, hi))
    cy = float(np.clip(S / 2 + rng.uniform(-1, 1) * spec.center_jitter * k, lo, hi))

    u, v = _ellipse_coords(S, cx, cy, a, b, theta)
    inside = (u * u + v * v <= 1.0) & (v >= -cut)

    img = _background(spec, rng, S)

    n_blobs = int(rng.integers(spec.distractors[0], spec.distractors[1] + 1))
    tongue_area = inside.sum()
    placed = 0
    for _ in range(200):
        if placed == n_blobs:
            break
        r = rng.uniform(*spec.distractor_radius) * k
        bx, by = rng.uniform(r, S - r, 2)
        bu, bv = _ellipse_coords(S, bx, by, r * rng.uniform(0.8, 1.2), r, rng.uniform(0, np.pi))
        blob = bu * bu + bv * bv <= 1.0
        if (blob & inside).sum() > spec.max_distractor_overlap * tongue_area:
            continue
        if (blob & inside).any():
            continue  # keep the ground truth unambiguous: no contact at all
        colour = _tongue_colour(spec, rng)
        noise = _smooth_noise(rng, S, 16)
        img[blob] = _shade(colour, bu, bv, noise, spec.texture)[blob]
        placed += 1

    colour = _tongue_colour(spec, rng)
    noise = _smooth_noise(rng, S, 16) + 0.5 * rng.standard_normal((S, S, 1))
    img[inside] = _shade(colour, u, v, noise, spec.texture)[inside]

    gain = rng.uniform(*spec.gain)
    bias = rng.uniform(*spec.bias)
    img = np.clip(np.round(img * gain + bias), 0, 255).astype(np.uint8)
    mask = inside.astype(np.uint8)
    return Sample(img, mask, box_from_mask(mask), spec.id, index, placed).validate(f"{spec.id}:{index}")


# -- manifests ------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    image: str
    mask: str
    domain: str
    index: int


@dataclass
class Manifest:
    root: Path
    records: list = field(default_factory=list)
    seed: Optional[int] = None
    spec_hash: str = ""

    def __len__(self):
        return len(self.records)

    @property
    def domains(self):
        return sorted({r.domain for r in self.records})

    def subset(self, indices):
        return Manifest(self.root, [self.records[i] for i in indices], self.seed, self.spec_hash)

    def write(self, path=None):
        path = Path(path) if path else self.root / MANIFEST_NAME
        lines = [f"#seed\t{self.seed}", f"#spec_hash\t{self.spec_hash}"]
        lines += [f"{r.image}\t{r.mask}\t{r.domain}\t{r.index}" for r in self.records]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            text = path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise ParseError(path, f"cannot read manifest ({exc})") from None
        man = cls(path.parent)
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if line.startswith("#"):
                if parts[0] == "#seed" and len(parts) == 2:
                    man.seed = None if parts[1] == "None" else int(parts[1])
                elif parts[0] == "#spec_hash" and len(parts) == 2:
                    man.spec_hash = parts[1]
                continue
            if len(parts) != 4:
                raise ParseError(path, f"line {lineno}: expected 4 tab-separated fields")
            try:
                man.records.append(ManifestRecord(parts[0], parts[1], parts[2], int(parts[3])))
            except ValueError:
                raise ParseError(path, f"line {lineno}: bad index {parts[3]!r}") from None
        return man

    def load(self, i) -> Sample:
        rec = self.records[i]
        s = load_sample(self.root / rec.image, self.root / rec.mask)
        s.domain, s.index = rec.domain, rec.index
        return s

    def load_all(self):
        return [self.load(i) for i in range(len(self))]


def generate(spec: DomainSpec, n: int, seed: int, root) -> Manifest:
    """Render ``n`` samples of ``spec`` into ``root`` and write its manifest."""
    if n < 1:
        raise ValueError("n must be at least 1")
    spec.validate()
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    man = Manifest(root, seed=seed, spec_hash=spec.digest())
    for i in range(n):
        s = render(spec, seed, i)
        name = f"{spec.id}_{i:05d}"
        rec = ManifestRecord(f"images/{name}.ppm", f"masks/{name}.pgm", spec.id, i)
        save_sample(s, root / rec.image, root / rec.mask)
        man.records.append(rec)
    man.write()
    return man


def split(manifest: Manifest, train_fraction: float, seed: int):
    """Seeded shuffle then prefix split into (train, test)."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    n = len(manifest)
    n_train = int(round(n * train_fraction))
    if n_train == 0 or n_train == n:
        raise ValueError(f"fraction {train_fraction} leaves an empty side for {n} samples")
    order = np.random.default_rng(seed).permutation(n)
    return manifest.subset(sorted(order[:n_train])), manifest.subset(sorted(order[n_train:]))


# -- sample files -------------------------------------------------------------


def save_sample(sample: Sample, image_path, mask_path):
    write_ppm(image_path, sample.image)
    write_pgm(mask_path, sample.mask.astype(np.uint8) * 255)


def load_sample(image_path, mask_path) -> Sample:
    image = read_ppm(image_path)
    gray, maxval = read_pgm(mask_path)
    if maxval != 255:
        raise MaskDomainError(mask_path, f"mask maxval must be 255, got {maxval}")
    bad = np.setdiff1d(np.unique(gray), [0, 255])
    if bad.size:
        raise MaskDomainError(mask_path, f"mask values must be 0 or 255, found {bad[:5].tolist()}")
    if image.shape[:2] != gray.shape:
        raise ParseError(mask_path, f"mask {gray.shape} does not match image {image.shape[:2]}")
    mask = (gray == 255).astype(np.uint8)
    if not mask.any():
        raise EmptyMaskError(f"{mask_path}: mask is empty")
    return Sample(image, mask, box_from_mask(mask))


def resize_mask_nearest(mask, size):
    """Nearest-neighbour resize; a non-empty mask never comes back empty."""
    mask = np.asarray(mask)
    H, W = mask.shape
    rows = np.minimum(((np.arange(size) + 0.5) * H / size).astype(int), H - 1)
    cols = np.minimum(((np.arange(size) + 0.5) * W / size).astype(int), W - 1)
    out = mask[rows][:, cols].copy()
    if mask.any() and not out.any():
        r, c = np.argwhere(mask)[0]
        out[min(int(r * size / H), size - 1), min(int(c * size / W), size - 1)] = mask[r, c]
    return out


def ingest_external(image_path, mask_path, target_size) -> Sample:
    """Load a user-supplied pixmap/graymap pair and resample it to ``target_size``."""
    arr, maxval = read_pnm(image_path)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    image = arr.astype(np.float64) * (255.0 / maxval)
    gray, gmax = read_pnm(mask_path)
    if gray.ndim == 3:
        gray = gray.mean(axis=2)
    gray = gray.astype(np.float64) * (255.0 / gmax)
    if image.shape[:2] != gray.shape:
        raise ParseError(mask_path, f"mask {gray.shape} does not match image {image.shape[:2]}")
    if image.shape[:2] != (target_size, target_size):
        image = K.bilinear_resize(image, target_size, target_size)
    image = np.clip(np.round(image), 0, 255).astype(np.uint8)
    mask = resize_mask_nearest((gray >= 128).astype(np.uint8), target_size)
    if not mask.any():
        raise EmptyMaskError(f"{mask_path}: mask is empty")
    return Sample(image, mask, box_from_mask(mask))


def stack(samples):
    """(images float64 in [0, 1] of shape (N, H, W, 3), masks uint8 (N, H, W))."""
    images = np.stack([s.image for s in samples]).astype(np.float64) / 255.0
    masks = np.stack([s.mask for s in samples]).astype(np.uint8)
    return images, masks
