"""Adam with bias correction and a plateau-triggered learning-rate decay."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .engine import Tensor

logger = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    """A non-finite value reached the optimizer."""


@dataclass
class AdamState:
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    # plateau bookkeeping
    decays: int = 0
    last_decay_at: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """Update ``params`` in place from ``grads`` (missing entries count as zero).

    Raises
    ------
    NumericError
        If any gradient holds NaN/inf; no parameter is touched in that case.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.data.dtype, copy=False)


def lr_plateau_decay(state: AdamState, history: Sequence[float], factor: float = 0.12,
                     patience: int = 5, threshold: float = 1e-4, max_decays: int = 3) -> float:
    """Decay ``state.lr`` when validation loss has flattened.

    A plateau is declared when at least ``patience`` evaluations have been
    made since the last decay and the best of the last ``patience`` values
    improves on the first of them by no more than ``threshold`` (relative).
    Returns the (possibly updated) learning rate.
    """
    if len(history) == 0:
        raise ValueError("history must be non-empty")
    n = len(history)
    if state.decays >= max_decays or n - state.last_decay_at < patience:
        return state.lr
    window = np.asarray(history[n - patience:], dtype=float)
    if window.min() >= window[0] * (1.0 - threshold):
        state.lr *= factor
        state.decays += 1
        state.last_decay_at = n
        logger.info("validation plateau after %d evaluations, lr -> %.3g", n, state.lr)
    return state.lr
