"""Adam over named parameter arrays."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from .errors import NumericError


@dataclass
class AdamState:
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, arrays):
        return cls(0, [np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def adam_step(params, grads, state: AdamState, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, names=None):
    """Update ``params`` (list of arrays) in place; bias-corrected moments.

    A non-finite gradient aborts the step before anything is modified.
    """
    for i, g in enumerate(grads):
        if not np.isfinite(g).all():
            name = names[i] if names else f"#{i}"
            finite = np.abs(g[np.isfinite(g)])
            raise NumericError(
                f"non-finite gradient in {name}; max |finite grad| = "
                f"{finite.max() if finite.size else float('nan')}"
            )
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state
