"""Focal loss for binary voxel occupancy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ConsistencyError

CLAMP_EPS = 1e-7
LOSS_MODES = ("standard", "paper_literal")


@dataclass(frozen=True)
class LossConfig:
    """``standard``: positives weighted ``alpha``, negatives ``1 - alpha``, alpha in (0, 1).

    ``paper_literal`` applies the same weighting rule but accepts any positive
    ``alpha``, e.g. ``alpha=2, gamma=0.25`` where free voxels get weight -1.
    """

    alpha: float = 0.25
    gamma: float = 2.0
    mode: str = "standard"

    @classmethod
    def paper_literal(cls):
        return cls(alpha=2.0, gamma=0.25, mode="paper_literal")

    def validate(self):
        if self.mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode: expected one of {LOSS_MODES}, got {self.mode!r}")
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise ConfigError(f"alpha: must be positive, got {self.alpha}")
        if self.mode == "standard" and not (0 < self.alpha < 1):
            raise ConfigError(f"alpha: standard mode needs alpha in (0, 1), got {self.alpha}")
        if not (np.isfinite(self.gamma) and self.gamma >= 0):
            raise ConfigError(f"gamma: must be >= 0, got {self.gamma}")
        return self


def focal_loss(probs, occupied, cfg: LossConfig, weights=None):
    """Mean focal loss over a batch of occupancy grids.

    Parameters
    ----------
    probs : list of arrays
        Predicted occupancy probabilities, one grid per scene (any shape).
    occupied : list of bool arrays
        Ground truth of the same shapes.
    weights : list of bool arrays, optional
        Restrict the sum to these voxels; the normaliser stays ``n_l``.

    Returns
    -------
    loss : float
    grads : list of arrays
        ``dloss/dlogit`` per scene, where ``probs = sigmoid(logits)``. Entries
        whose probability was clamped into ``[eps, 1 - eps]`` get zero gradient.
    clamp_count : int
    """
    cfg.validate()
    if isinstance(probs, np.ndarray):
        probs, occupied = [probs], [occupied]
        weights = None if weights is None else [weights]
    if len(probs) != len(occupied) or not probs:
        raise ConsistencyError("need one target per prediction and a non-empty batch")
    batch = len(probs)
    total = 0.0
    grads = []
    clamps = 0
    for i, (p, t) in enumerate(zip(probs, occupied)):
        p = np.asarray(p, dtype=np.float64)
        t = np.asarray(t, dtype=bool)
        if p.shape != t.shape:
            raise ConsistencyError(f"prediction shape {p.shape} != target shape {t.shape}")
        n_l = p.size
        clamped = (p < CLAMP_EPS) | (p > 1.0 - CLAMP_EPS)
        clamps += int(clamped.sum())
        pc = np.clip(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
        q = np.where(t, pc, 1.0 - pc)
        a_t = np.where(t, cfg.alpha, 1.0 - cfg.alpha)
        one_m = 1.0 - q
        log_q = np.log(q)
        mod = one_m ** cfg.gamma
        terms = -a_t * mod * log_q
        # dq/dz = +q(1-q) for occupied, -q(1-q) for free
        sign = np.where(t, 1.0, -1.0)
        g = a_t * sign * (cfg.gamma * mod * q * log_q - mod * one_m)
        g = np.where(clamped, 0.0, g)
        if weights is not None and weights[i] is not None:
            w = np.asarray(weights[i], dtype=bool)
            terms = np.where(w, terms, 0.0)
            g = np.where(w, g, 0.0)
        scale = 1.0 / (batch * n_l)
        total += float(terms.sum()) * scale
        grads.append(g * scale)
    return total, grads, clamps
