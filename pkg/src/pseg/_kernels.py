"""Hot inner loops, each with a numba and a pure-numpy implementation.

Numba is used when it imports cleanly and ``PSEG_DISABLE_NUMBA`` is unset
(or set to ``0``). Both paths are exposed under explicit names so tests and
the benchmark can compare them regardless of which one is active.
"""
from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import erf

_flag = os.environ.get("PSEG_DISABLE_NUMBA", "0").strip().lower()
_disabled = _flag not in ("", "0", "false", "no")

try:
    if _disabled:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised with the env flag
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def conv_out_size(n, k, s, p):
    return (n + 2 * p - k) // s + 1


# -- numpy implementations ---------------------------------------------------


def im2col_numpy(x, k, s, p):
    """(B, C, H, W) -> (B, C*k*k, Ho*Wo), column order (c, ki, kj)."""
    B, C, H, W = x.shape
    Ho, Wo = conv_out_size(H, k, s, p), conv_out_size(W, k, s, p)
    if k == s and p == 0 and H == Ho * k and W == Wo * k:
        cols = x.reshape(B, C, Ho, k, Wo, k).transpose(0, 1, 3, 5, 2, 4)
        return np.ascontiguousarray(cols).reshape(B, C * k * k, Ho * Wo)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = np.empty((B, C, k, k, Ho, Wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + s * Ho:s, j:j + s * Wo:s]
    return cols.reshape(B, C * k * k, Ho * Wo)


def col2im_numpy(cols, shape, k, s, p):
    """Adjoint of :func:`im2col_numpy`: scatter-add columns into (B, C, H, W)."""
    B, C, H, W = shape
    Ho, Wo = conv_out_size(H, k, s, p), conv_out_size(W, k, s, p)
    cols = cols.reshape(B, C, k, k, Ho, Wo)
    if k == s and p == 0 and H == Ho * k and W == Wo * k:
        out = cols.transpose(0, 1, 4, 2, 5, 3)
        return np.ascontiguousarray(out).reshape(B, C, H, W)
    out = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += cols[:, :, i, j]
    if p:
        out = out[:, :, p:p + H, p:p + W]
    return np.ascontiguousarray(out)


def gelu_numpy(x):
    return 0.5 * x * (1.0 + erf(x * _SQRT1_2))


def gelu_grad_numpy(x, g):
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return g * (cdf + x * pdf)


def _bilinear_taps(n_in, n_out):
    # half-pixel centres, edge-clamped
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def bilinear_resize_numpy(img, out_h, out_w):
    """Resize the two leading axes of ``img`` (H, W[, ...]) bilinearly."""
    img = np.asarray(img, dtype=np.float64)
    r0, r1, fr = _bilinear_taps(img.shape[0], out_h)
    c0, c1, fc = _bilinear_taps(img.shape[1], out_w)
    extra = (1,) * (img.ndim - 2)
    fr = fr.reshape((-1, 1) + extra)
    fc = fc.reshape((1, -1) + extra)
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


def fnv1a64_numpy(data):
    h = FNV_OFFSET
    for byte in bytes(data):
        h = ((h ^ byte) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def confusion_numpy(pred, gt):
    pred = np.asarray(pred).astype(bool).ravel()
    gt = np.asarray(gt).astype(bool).ravel()
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn, pred.size - tp - fp - fn


# -- numba implementations ---------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_nb(x, k, s, p, Ho, Wo):
        B, C, H, W = x.shape
        out = np.zeros((B, C, k, k, Ho, Wo))
        for b in range(B):
            for c in range(C):
                for i in range(k):
                    for j in range(k):
                        for oh in range(Ho):
                            ih = oh * s + i - p
                            if ih < 0 or ih >= H:
                                continue
                            for ow in range(Wo):
                                iw = ow * s + j - p
                                if 0 <= iw < W:
                                    out[b, c, i, j, oh, ow] = x[b, c, ih, iw]
        return out

    @njit(cache=True)
    def _col2im_nb(cols, B, C, H, W, k, s, p, Ho, Wo):
        out = np.zeros((B, C, H, W))
        for b in range(B):
            for c in range(C):
                for i in range(k):
                    for j in range(k):
                        for oh in range(Ho):
                            ih = oh * s + i - p
                            if ih < 0 or ih >= H:
                                continue
                            for ow in range(Wo):
                                iw = ow * s + j - p
                                if 0 <= iw < W:
                                    out[b, c, ih, iw] += cols[b, c, i, j, oh, ow]
        return out

    @njit(cache=True)
    def _gelu_nb(x):
        flat = x.ravel()
        out = np.empty_like(flat)
        for i in range(flat.size):
            v = flat[i]
            out[i] = 0.5 * v * (1.0 + math.erf(v * _SQRT1_2))
        return out.reshape(x.shape)

    @njit(cache=True)
    def _gelu_grad_nb(x, g):
        xf = x.ravel()
        gf = g.ravel()
        out = np.empty_like(xf)
        for i in range(xf.size):
            v = xf[i]
            cdf = 0.5 * (1.0 + math.erf(v * _SQRT1_2))
            pdf = _INV_SQRT_2PI * math.exp(-0.5 * v * v)
            out[i] = gf[i] * (cdf + v * pdf)
        return out.reshape(x.shape)

    @njit(cache=True)
    def _bilinear_nb(img, r0, r1, fr, c0, c1, fc):
        H = r0.size
        W = c0.size
        D = img.shape[2]
        out = np.empty((H, W, D))
        for i in range(H):
            a = fr[i]
            for j in range(W):
                b = fc[j]
                for d in range(D):
                    top = img[r0[i], c0[j], d] * (1 - b) + img[r0[i], c1[j], d] * b
                    bot = img[r1[i], c0[j], d] * (1 - b) + img[r1[i], c1[j], d] * b
                    out[i, j, d] = top * (1 - a) + bot * a
        return out

    @njit(cache=True)
    def _fnv1a64_nb(buf):
        h = np.uint64(FNV_OFFSET)
        prime = np.uint64(FNV_PRIME)
        for i in range(buf.size):
            h = (h ^ np.uint64(buf[i])) * prime
        return h

    @njit(cache=True)
    def _confusion_nb(pred, gt):
        tp = 0
        fp = 0
        fn = 0
        n = pred.size
        for i in range(n):
            if pred[i]:
                if gt[i]:
                    tp += 1
                else:
                    fp += 1
            elif gt[i]:
                fn += 1
        return tp, fp, fn, n - tp - fp - fn

    def im2col_numba(x, k, s, p):
        B, C, H, W = x.shape
        Ho, Wo = conv_out_size(H, k, s, p), conv_out_size(W, k, s, p)
        out = _im2col_nb(np.ascontiguousarray(x), k, s, p, Ho, Wo)
        return out.reshape(B, C * k * k, Ho * Wo)

    def col2im_numba(cols, shape, k, s, p):
        B, C, H, W = shape
        Ho, Wo = conv_out_size(H, k, s, p), conv_out_size(W, k, s, p)
        cols = np.ascontiguousarray(cols).reshape(B, C, k, k, Ho, Wo)
        return _col2im_nb(cols, B, C, H, W, k, s, p, Ho, Wo)

    def gelu_numba(x):
        return _gelu_nb(np.ascontiguousarray(x))

    def gelu_grad_numba(x, g):
        return _gelu_grad_nb(np.ascontiguousarray(x), np.ascontiguousarray(g))

    def bilinear_resize_numba(img, out_h, out_w):
        img = np.asarray(img, dtype=np.float64)
        r0, r1, fr = _bilinear_taps(img.shape[0], out_h)
        c0, c1, fc = _bilinear_taps(img.shape[1], out_w)
        flat = np.ascontiguousarray(img.reshape(img.shape[0], img.shape[1], -1))
        out = _bilinear_nb(flat, r0, r1, fr, c0, c1, fc)
        return out.reshape((out_h, out_w) + img.shape[2:])

    def fnv1a64_numba(data):
        buf = np.frombuffer(bytes(data), dtype=np.uint8)
        return int(_fnv1a64_nb(buf))

    def confusion_numba(pred, gt):
        pred = np.ascontiguousarray(pred).astype(np.bool_).ravel()
        gt = np.ascontiguousarray(gt).astype(np.bool_).ravel()
        return tuple(int(v) for v in _confusion_nb(pred, gt))


_NAMES = ("im2col", "col2im", "gelu", "gelu_grad", "bilinear_resize", "fnv1a64", "confusion")

NUMPY_IMPLS = {name: globals()[f"{name}_numpy"] for name in _NAMES}
NUMBA_IMPLS = {name: globals()[f"{name}_numba"] for name in _NAMES} if HAVE_NUMBA else {}

_active = NUMBA_IMPLS if USE_NUMBA else NUMPY_IMPLS

# im2col: the strided-slice numpy version already runs at memory bandwidth.
# col2im: the overlapping scatter-add is where numba pays off; the
# non-overlapping (patch embedding) case stays a pure reshape.
im2col = im2col_numpy


def col2im(cols, shape, k, s, p):
    if k == s and p == 0 or not USE_NUMBA:
        return col2im_numpy(cols, shape, k, s, p)
    return NUMBA_IMPLS["col2im"](cols, shape, k, s, p)

gelu = _active["gelu"]
gelu_grad = _active["gelu_grad"]
bilinear_resize = _active["bilinear_resize"]
fnv1a64 = _active["fnv1a64"]
confusion = _active["confusion"]


def backend():
    return "numba" if USE_NUMBA else "numpy"
