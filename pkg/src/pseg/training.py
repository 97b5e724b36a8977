"""Shared minibatch loop: shuffle, tape, backward, Adam, keep the best epoch."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .numerics import Adam, Tape, backward

log = logging.getLogger(__name__)


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    first_loss: float
    last_loss: float
    score: float


def train_loop(params, batch_loss, n, *, epochs, batch_size, lr, seed, validate,
               higher_is_better=True, label="train", initial_score=None, on_epoch=None):
    """Run Adam over ``n`` examples and restore the best-validating weights.

    ``batch_loss(indices, rng)`` builds the loss for one minibatch on the
    active tape. ``validate()`` returns the model-selection score. When
    ``initial_score`` is given the untouched starting weights compete too.
    Returns the per-epoch history.
    """
    if n < 1:
        raise ValueError(f"{label}: empty training set")
    rng = np.random.default_rng(seed)
    opt = Adam(params, lr=lr)
    better = (lambda a, b: a > b) if higher_is_better else (lambda a, b: a < b)
    best_score, best_state = initial_score, None
    if initial_score is not None:
        best_state = [p.data.copy() for p in params]
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            with Tape() as tape:
                loss = batch_loss(idx, rng)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"{label}: loss diverged at epoch {epoch}")
            opt.step(backward(tape, loss))
            losses.append(value)
        if on_epoch is not None:
            on_epoch(epoch)
        score = float(validate())
        history.append(EpochLog(epoch, float(np.mean(losses)), losses[0], losses[-1], score))
        log.info("%s epoch %d loss %.4f score %.4f", label, epoch, np.mean(losses), score)
        if best_score is None or better(score, best_score):
            best_score, best_state = score, [p.data.copy() for p in params]
    for p, arr in zip(params, best_state):
        p.data[...] = arr
    return history
