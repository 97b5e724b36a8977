"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays. While a :class:`Tape` is active,
every operation with at least one ``requires_grad`` input appends a record
holding its inputs, its output and a closure computing the vector-Jacobian
product. :func:`backward` replays the records in reverse.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..errors import NumericError, ShapeError, TapeError

_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")
    # make ndarray (op) Tensor dispatch to our reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64, copy=True)
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; the functions live in ops.py
    def __add__(self, other):
        from .ops import add
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from .ops import sub
        return sub(self, other)

    def __rsub__(self, other):
        from .ops import sub
        return sub(other, self)

    def __mul__(self, other):
        from .ops import mul
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from .ops import div
        return div(self, other)

    def __rtruediv__(self, other):
        from .ops import div
        return div(other, self)

    def __neg__(self):
        from .ops import mul
        return mul(self, -1.0)

    def __matmul__(self, other):
        from .ops import matmul
        return matmul(self, other)

    def __getitem__(self, idx):
        from .ops import index
        return index(self, idx)

    def reshape(self, *shape):
        from .ops import reshape
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        from .ops import transpose
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from .ops import sum_
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from .ops import mean
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


@dataclass
class Record:
    kind: str
    inputs: tuple
    output: Tensor
    vjp: Callable


class Tape:
    """Ordered log of differentiable operations; use as a context manager."""

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)


def active_tape():
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


class no_tape:
    """Temporarily suspend recording (e.g. for validation passes)."""

    def __enter__(self):
        self._saved = list(_ACTIVE_TAPES)
        _ACTIVE_TAPES.clear()

    def __exit__(self, *exc):
        _ACTIVE_TAPES[:] = self._saved
        return False


def check_finite(arr, kind):
    if not np.isfinite(arr).all():
        raise NumericError(f"{kind}: non-finite output")


def emit(kind: str, out: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap a primitive's output and record it if anything upstream needs grads."""
    check_finite(out, kind)
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=track)
    if track:
        tape.records.append(Record(kind, tuple(inputs), result, vjp))
    return result


def backward(tape: Tape, loss: Tensor) -> dict:
    """Propagate d(loss)/d(.) through ``tape``.

    Returns a mapping from each ``requires_grad`` leaf reached to its
    gradient array; the gradient is also accumulated into ``leaf.grad``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    position = {id(r.output): i for i, r in enumerate(tape.records)}
    if id(loss) not in position:
        raise TapeError("loss was not produced on this tape")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for rec in reversed(tape.records[: position[id(loss)] + 1]):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        needs = tuple(t.requires_grad for t in rec.inputs)
        for t, need, gi in zip(rec.inputs, needs, rec.vjp(g, needs)):
            if not need or gi is None:
                continue
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi
            if key not in position:
                leaves[key] = t
    result = {}
    for key, leaf in leaves.items():
        g = grads[key].reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    return result

