"""Two-class segmentation metrics (mIoU, mPA, Acc), overlays and CSV reports."""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import ShapeError

CSV_HEADER = "method,generator,train_domain,eval_domain,miou,mpa,acc,seed,n"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred, gt) -> ConfusionCounts:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return ConfusionCounts(*K.confusion(pred, gt))


def _class_terms(c: ConfusionCounts):
    # (present, iou numerator/denominator, pa numerator/denominator) per class;
    # a class is present when it occurs in the prediction or the ground truth
    fg_present = c.tp + c.fp + c.fn > 0
    bg_present = c.tn + c.fp + c.fn > 0
    return ((fg_present, c.tp, c.tp + c.fp + c.fn, c.tp, c.tp + c.fn),
            (bg_present, c.tn, c.tn + c.fn + c.fp, c.tn, c.tn + c.fp))


def miou(c: ConfusionCounts) -> float:
    vals = [num / den for present, num, den, _, _ in _class_terms(c) if present]
    return 100.0 * sum(vals) / len(vals)


def mpa(c: ConfusionCounts) -> float:
    # a class absent from the ground truth but predicted has PA denominator 0;
    # its error already shows up in the other class's PA
    vals = [num / den for present, _, _, num, den in _class_terms(c) if present and den > 0]
    return 100.0 * sum(vals) / len(vals)


def acc(c: ConfusionCounts) -> float:
    if c.total <= 0:
        raise ValueError("accuracy of an empty confusion table")
    return 100.0 * (c.tp + c.tn) / c.total


@dataclass(frozen=True)
class EvalRecord:
    method: str
    generator: str
    train_domain: str
    eval_domain: str
    miou: float
    mpa: float
    acc: float
    seed: int
    n: int

    def csv_row(self):
        return (f"{self.method},{self.generator},{self.train_domain},{self.eval_domain},"
                f"{self.miou:.2f},{self.mpa:.2f},{self.acc:.2f},{self.seed},{self.n}")


def aggregate(counts, *, method="", generator="", train_domain="", eval_domain="", seed=0):
    """Pool confusion counts over images, then compute each metric once."""
    counts = list(counts)
    if not counts:
        raise ValueError("aggregate needs at least one image")
    total = sum(counts[1:], counts[0])
    return EvalRecord(method, generator, train_domain, eval_domain,
                      miou(total), mpa(total), acc(total), seed, len(counts))


def write_report(records, path=None):
    """CSV text sorted by (method, eval_domain); also written to ``path`` if given."""
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    for rec in sorted(records, key=lambda r: (r.method, r.eval_domain)):
        buf.write(rec.csv_row() + "\n")
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def read_report(text):
    lines = text.strip().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError("not a metrics report")
    out = []
    for line in lines[1:]:
        m, g, tr, ev, a, b, c, seed, n = line.split(",")
        out.append(EvalRecord(m, g, tr, ev, float(a), float(b), float(c), int(seed), int(n)))
    return out


def overlay(image, mask):
    """Blend foreground pixels 50/50 with pure blue (integer floor)."""
    image = np.asarray(image, dtype=np.uint8)
    mask = np.asarray(mask).astype(bool)
    if image.shape[:2] != mask.shape:
        raise ShapeError(f"image {image.shape} and mask {mask.shape} differ")
    out = image.copy()
    blue = np.array([0, 0, 255], dtype=np.uint16)
    out[mask] = ((image[mask].astype(np.uint16) + blue) // 2).astype(np.uint8)
    return out
