"""Small layer library on top of :mod:`pseg.numerics`.

Any :class:`Tensor` attribute of a :class:`Module` is a parameter; nested
modules and lists of modules are walked in attribute-insertion order, so
parameter names are stable and checkpoints are deterministic.
"""
from __future__ import annotations

import hashlib
import math

import numpy as np

from .numerics import Tensor, ops


class Module:
    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unknown = set(state) - set(own)
        if missing or unknown:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unknown={sorted(unknown)}")
        for name, arr in state.items():
            if own[name].shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {own[name].shape}")
            own[name].data = np.array(arr, dtype=np.float64)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False

    def unfreeze(self):
        for p in self.parameters():
            p.requires_grad = True

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def digest(self):
        """SHA-256 over every parameter payload, in name order."""
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def _param(arr):
    return Tensor(arr, requires_grad=True)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        limit = math.sqrt(6.0 / (d_in + d_out))
        self.weight = _param(rng.uniform(-limit, limit, (d_in, d_out)))
        self.bias = _param(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        y = ops.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-6):
        self.weight = _param(np.ones(dim))
        self.bias = _param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class LayerNorm2d(LayerNorm):
    """Layer norm over the channel axis of an NCHW map."""

    def __call__(self, x):
        y = ops.transpose(x, (0, 2, 3, 1))
        y = ops.layer_norm(y, self.weight, self.bias, self.eps)
        return ops.transpose(y, (0, 3, 1, 2))


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, bias=True):
        std = math.sqrt(2.0 / (c_in * kernel * kernel))
        self.weight = _param(rng.normal(0.0, std, (c_out, c_in, kernel, kernel)))
        self.bias = _param(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, bias=True):
        std = math.sqrt(2.0 / (c_in * kernel * kernel))
        self.weight = _param(rng.normal(0.0, std, (c_in, c_out, kernel, kernel)))
        self.bias = _param(np.zeros(c_out)) if bias else None
        self.stride = stride

    def __call__(self, x):
        return ops.conv_transpose2d(x, self.weight, self.bias, self.stride)


class MLP(Module):
    """Stack of Linear layers with an activation between them (not after the last)."""

    def __init__(self, dims, rng, activation=ops.relu):
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.activation = activation

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.activation(x)
        return x


class Attention(Module):
    """Multi-head attention over (B, N, C) sequences.

    The key projection has no bias: a key bias adds the same amount to every
    logit of a query, so softmax cancels it and its gradient is always zero.
    """

    def __init__(self, dim, num_heads, rng):
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng, bias=False)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)

    def _split(self, x):
        B, N, C = x.shape
        x = ops.reshape(x, (B, N, self.num_heads, C // self.num_heads))
        return ops.transpose(x, (0, 2, 1, 3))

    def __call__(self, q, k, v):
        B, Nq, C = q.shape
        q = self._split(self.q_proj(q))
        k = self._split(self.k_proj(k))
        v = self._split(self.v_proj(v))
        scale = 1.0 / math.sqrt(C // self.num_heads)
        attn = ops.softmax(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))) * scale)
        out = ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3))
        return self.out_proj(ops.reshape(out, (B, Nq, C)))
