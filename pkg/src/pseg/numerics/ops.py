"""Differentiable primitives.

Every function takes and returns :class:`~pseg.numerics.tensor.Tensor`
objects (plain numbers and arrays are promoted to constants). Each
backward closure receives the upstream gradient and a tuple of flags
saying which inputs need a gradient.
"""
from __future__ import annotations

import numpy as np

from .. import _kernels as K
from ..errors import ShapeError
from .tensor import Tensor, as_tensor, emit


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise arithmetic -------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return emit("add", a.data + b.data, (a, b), vjp)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return emit("sub", a.data - b.data, (a, b), vjp)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def vjp(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return emit("mul", a.data * b.data, (a, b), vjp)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def vjp(g, needs):
        return (_unbroadcast(g / b.data, a.shape) if needs[0] else None,
                _unbroadcast(-g * out / b.data, b.shape) if needs[1] else None)

    return emit("div", out, (a, b), vjp)


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("minimum", a, b)
    pick_a = a.data <= b.data

    def vjp(g, needs):
        return (_unbroadcast(g * pick_a, a.shape) if needs[0] else None,
                _unbroadcast(g * ~pick_a, b.shape) if needs[1] else None)

    return emit("minimum", np.minimum(a.data, b.data), (a, b), vjp)


def maximum(a, b):
    return -minimum(-as_tensor(a), -as_tensor(b))


# -- shape manipulation -----------------------------------------------------


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return emit("reshape", out, (x,), lambda g, needs: (g.reshape(x.shape),))


def transpose(x, axes):
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return emit("transpose", out, (x,), lambda g, needs: (g.transpose(inv),))


def broadcast_to(x, shape):
    x = as_tensor(x)
    try:
        out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    except ValueError:
        raise ShapeError(f"broadcast_to: {x.shape} -> {tuple(shape)}") from None
    return emit("broadcast_to", out, (x,), lambda g, needs: (_unbroadcast(g, x.shape),))


def index(x, idx):
    x = as_tensor(x)
    out = np.array(x.data[idx])

    def vjp(g, needs):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return emit("index", out, (x,), vjp)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g, needs):
        return tuple(np.split(g, bounds, axis=axis))

    return emit("concat", out, tensors, vjp)


# -- reductions -------------------------------------------------------------


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return emit("sum", out, (x,), vjp)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))

    def vjp(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return emit("mean", out, (x,), vjp)


# -- linear algebra ---------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} disagree") from None

    def vjp(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if needs[1]:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return emit("matmul", out, (a, b), vjp)


# -- nonlinearities ---------------------------------------------------------


def exp(x):
    x = as_tensor(x)
    with np.errstate(over="ignore"):  # overflow surfaces as NumericError in emit
        out = np.exp(x.data)
    return emit("exp", out, (x,), lambda g, needs: (g * out,))


def log(x):
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return emit("log", out, (x,), lambda g, needs: (g / x.data,))


def relu(x):
    x = as_tensor(x)
    pos = x.data > 0
    return emit("relu", x.data * pos, (x,), lambda g, needs: (g * pos,))


def sigmoid(x):
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return emit("sigmoid", out, (x,), lambda g, needs: (g * out * (1.0 - out),))


def _sigmoid(v):
    return np.exp(-np.logaddexp(0.0, -v))


def softplus(x):
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    return emit("softplus", out, (x,), lambda g, needs: (g * _sigmoid(x.data),))


def gelu(x):
    x = as_tensor(x)
    return emit("gelu", K.gelu(x.data), (x,), lambda g, needs: (K.gelu_grad(x.data, g),))


def softmax(x):
    """Softmax over the last axis."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g, needs):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return emit("softmax", s, (x,), vjp)


def layer_norm(x, gamma=None, beta=None, eps=1e-6):
    """Normalise over the last axis, then apply the optional affine pair."""
    x = as_tensor(x)
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    inputs = [x]
    out = xhat
    if gamma is not None:
        gamma = as_tensor(gamma)
        if gamma.shape != (n,):
            raise ShapeError(f"layer_norm: gamma shape {gamma.shape} != ({n},)")
        out = out * gamma.data
        inputs.append(gamma)
    if beta is not None:
        beta = as_tensor(beta)
        if beta.shape != (n,):
            raise ShapeError(f"layer_norm: beta shape {beta.shape} != ({n},)")
        out = out + beta.data
        inputs.append(beta)

    def vjp(g, needs):
        gh = g * gamma.data if gamma is not None else g
        gx = None
        if needs[0]:
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        lead = tuple(range(g.ndim - 1))
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return grads

    return emit("layer_norm", out, inputs, vjp)


def dropout(x, p, train, rng):
    """Inverted dropout; the identity when ``train`` is false or ``p`` is 0."""
    x = as_tensor(x)
    if not train or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return emit("dropout", x.data * keep, (x,), lambda g, needs: (g * keep,))


# -- convolutions -----------------------------------------------------------


def conv2d(x, w, b=None, stride=1, padding=0):
    """x: (B, Ci, H, W); w: (Co, Ci, k, k); b: (Co,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    B, Ci, H, W = x.shape
    Co, _, k, _ = w.shape
    Ho, Wo = K.conv_out_size(H, k, stride, padding), K.conv_out_size(W, k, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {k} too large for {H}x{W} input")
    cols = K.im2col(x.data, k, stride, padding)
    w2 = w.data.reshape(Co, -1)
    out = np.matmul(w2, cols)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        out += b.data[:, None]
        inputs.append(b)

    def vjp(g, needs):
        g = g.reshape(B, Co, Ho * Wo)
        gx = gw = None
        if needs[0]:
            gx = K.col2im(np.matmul(w2.T, g), x.shape, k, stride, padding)
        if needs[1]:
            gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    return emit("conv2d", out.reshape(B, Co, Ho, Wo), inputs, vjp)


def conv_transpose2d(x, w, b=None, stride=1, padding=0):
    """x: (B, Ci, H, W); w: (Ci, Co, k, k); output side (H-1)*stride + k - 2*padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != x.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} incompatible with weight {w.shape}")
    B, Ci, H, W = x.shape
    _, Co, k, _ = w.shape
    Ho = (H - 1) * stride + k - 2 * padding
    Wo = (W - 1) * stride + k - 2 * padding
    w2 = w.data.reshape(Ci, Co * k * k)
    x2 = x.data.reshape(B, Ci, H * W)
    out = K.col2im(np.matmul(w2.T, x2), (B, Co, Ho, Wo), k, stride, padding)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        out += b.data[None, :, None, None]
        inputs.append(b)

    def vjp(g, needs):
        gcols = K.im2col(g, k, stride, padding)
        gx = gw = None
        if needs[0]:
            gx = np.matmul(w2, gcols).reshape(x.shape)
        if needs[1]:
            gw = np.tensordot(x2, gcols, axes=([0, 2], [0, 2])).reshape(w.shape)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return emit("conv_transpose2d", out, inputs, vjp)


# -- losses ------------------------------------------------------------------


def bce_with_logits(logits, target):
    """Mean binary cross-entropy of sigmoid(logits) against ``target``."""
    target = as_tensor(target)
    return mean(softplus(logits) - logits * target)


def dice_loss(logits, target, smooth=1.0):
    """1 - soft Dice, averaged over the leading (batch) axis."""
    target = as_tensor(target)
    p = sigmoid(logits)
    axes = tuple(range(1, p.ndim))
    inter = (p * target).sum(axis=axes)
    denom = p.sum(axis=axes) + target.sum(axis=axes)
    return mean(1.0 - (2.0 * inter + smooth) / (denom + smooth))


PRIMITIVES = {
    "matmul": matmul, "add": add, "mul": mul, "reshape": reshape,
    "transpose": transpose, "conv2d": conv2d, "transposed_conv2d": conv_transpose2d,
    "softmax_lastdim": softmax, "layer_norm": layer_norm, "gelu": gelu,
    "relu": relu, "sigmoid": sigmoid, "dropout": dropout, "mean": mean, "sum": sum_,
}


def primitive_forward(kind, *inputs, **attrs):
    """Dispatch a primitive by name."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **attrs)


__all__ = [name for name in dir() if not name.startswith("_")] + ["Tensor"]
