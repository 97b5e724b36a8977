"""Central finite-difference oracle for tape gradients."""
from __future__ import annotations

import numpy as np

from ..errors import NumericError
from .tensor import Tape, Tensor, backward


def finite_diff_check(f, x: Tensor, eps=1e-5, max_components=None, rng=None):
    """Max relative error between the tape gradient and central differences.

    ``f`` maps ``x`` to a scalar tensor and must be deterministic. ``x`` may
    be a model parameter that ``f`` closes over; it is perturbed in place
    and restored. With ``max_components`` only a random subset of entries is
    probed, which keeps checks on large parameter tensors affordable.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    saved_flag, saved_grad = x.requires_grad, x.grad
    x.requires_grad, x.grad = True, None
    try:
        with Tape() as tape:
            out = f(x)
        if out.requires_grad:
            analytic = backward(tape, out).get(x, np.zeros_like(x.data))
        else:
            analytic = np.zeros_like(x.data)
        _finite(out)

        flat = x.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_components is not None and flat.size > max_components:
            rng = rng or np.random.default_rng(0)
            idx = np.sort(rng.choice(flat.size, max_components, replace=False))
        worst = 0.0
        ga = analytic.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            hi = _finite(f(x))
            flat[i] = orig - eps
            lo = _finite(f(x))
            flat[i] = orig
            g_fd = (hi - lo) / (2 * eps)
            err = abs(ga[i] - g_fd) / max(1e-8, abs(ga[i]) + abs(g_fd))
            worst = max(worst, err)
        return worst
    finally:
        x.requires_grad, x.grad = saved_flag, saved_grad


def _finite(t):
    v = float(np.asarray(t.data).reshape(-1)[0])
    if not np.isfinite(v):
        raise NumericError("finite_diff_check: function returned a non-finite value")
    return v
