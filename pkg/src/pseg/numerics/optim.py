"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params, **kw):
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params], **kw)


def adam_step(params, grads, state: AdamState, lr=1e-4):
    """Update ``params`` in place and return ``(params, state)``.

    A ``None`` gradient is treated as zero (the parameter took no part in
    the loss).
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError("adam_step: params, grads and moments differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"adam_step: grad {g.shape} vs param {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


class Adam:
    """Convenience wrapper binding a parameter list to its state."""

    def __init__(self, params, lr=1e-4, **kw):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState.for_params(self.params, **kw)

    def step(self, grads: dict):
        adam_step(self.params, [grads.get(p) for p in self.params], self.state, self.lr)
