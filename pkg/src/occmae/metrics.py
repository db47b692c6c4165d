"""Confusion-count metrics for occupancy reconstructions."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np

from .errors import ConsistencyError, ConfigError
from .scene import band_index
from .voxel import GridConfig, unravel_index

GROUPS = ("overall", "band0", "band1", "band2", "masked", "masked_band0", "masked_band1", "masked_band2",
          "visible")


def _ratio(num, den, vacuous):
    if den:
        return num / den
    return 1.0 if vacuous else 0.0


@dataclass(frozen=True)
class Counts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    @property
    def precision(self):
        return _ratio(self.tp, self.tp + self.fp, self.tp + self.fp + self.fn == 0)

    @property
    def recall(self):
        return _ratio(self.tp, self.tp + self.fn, self.tp + self.fp + self.fn == 0)

    @property
    def iou(self):
        return _ratio(self.tp, self.tp + self.fp + self.fn, True)


@dataclass
class OccMetrics:
    """Counts per group.

    ``bandK`` groups hold every voxel whose center lies in range band ``K``.
    ``masked*`` groups hold the voxels hidden from the encoder: everything but
    the visible occupied voxels, so masked occupied voxels are the positives and
    free voxels can still be false positives.
    """

    groups: Dict[str, Counts]
    threshold: float

    def __getitem__(self, key):
        return self.groups[key]

    @property
    def masked_iou(self):
        return self.groups["masked"].iou

    @property
    def visible_iou(self):
        return self.groups["visible"].iou

    def as_row(self, prefix=""):
        row = {}
        for name, c in self.groups.items():
            row[f"{prefix}{name}_precision"] = c.precision
            row[f"{prefix}{name}_recall"] = c.recall
            row[f"{prefix}{name}_iou"] = c.iou
        return row


def _counts(pred, truth, region):
    p, t = pred[region], truth[region]
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return Counts(tp, fp, fn, int(p.size) - tp - fp - fn)


def voxel_bands(grid: GridConfig, sensor_origin=(0.0, 0.0, 0.0), band_edges=(30.0, 50.0), metric="xy"):
    """Range band of every voxel, flat in linear-index order."""
    lin = np.arange(grid.n_voxels)
    centers = np.asarray(grid.min_corner) + (unravel_index(lin, grid.dims) + 0.5) * np.asarray(grid.voxel_size)
    delta = centers - np.asarray(sensor_origin, dtype=np.float64)
    if metric == "xy":
        delta = delta[:, :2]
    return band_index(np.sqrt((delta ** 2).sum(axis=1)), band_edges)


def score(probs, target, plan, threshold=0.5, grid: GridConfig = None, sensor_origin=(0.0, 0.0, 0.0),
          band_edges=(30.0, 50.0), metric="xy", bands=None) -> OccMetrics:
    """Threshold ``probs`` at ``threshold`` and tally confusion counts.

    Voxels with ``probs >= threshold`` count as predicted occupied.
    """
    if not (0.0 < threshold < 1.0):
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    probs = np.asarray(probs, dtype=np.float64).ravel()
    if probs.size != target.n_voxels:
        raise ConsistencyError(f"{probs.size} predictions for a grid of {target.n_voxels} voxels")
    if bands is None:
        if grid is None:
            raise ConsistencyError("score needs either grid or precomputed bands")
        bands = voxel_bands(grid, sensor_origin, band_edges, metric)
    truth = np.zeros(target.n_voxels, dtype=bool)
    truth[target.occupied] = True
    pred = probs >= threshold
    hidden = np.ones(target.n_voxels, dtype=bool)
    hidden[plan.visible] = False
    visible = ~hidden

    groups = {"overall": _counts(pred, truth, slice(None))}
    for b in range(3):
        groups[f"band{b}"] = _counts(pred, truth, bands == b)
    groups["masked"] = _counts(pred, truth, hidden)
    for b in range(3):
        groups[f"masked_band{b}"] = _counts(pred, truth, hidden & (bands == b))
    groups["visible"] = _counts(pred, truth, visible)
    return OccMetrics(groups, threshold)


def best_f1_threshold(probs, occupied, candidates=None):
    """Threshold in ``candidates`` with the highest F1 on one validation grid."""
    probs = np.asarray(probs, dtype=np.float64).ravel()
    truth = np.asarray(occupied, dtype=bool).ravel()
    if candidates is None:
        candidates = np.linspace(0.05, 0.95, 19)
    best, best_f1 = 0.5, -1.0
    for tau in candidates:
        pred = probs >= tau
        tp = np.count_nonzero(pred & truth)
        denom = np.count_nonzero(pred) + np.count_nonzero(truth)
        f1 = 2.0 * tp / denom if denom else 1.0
        if f1 > best_f1:
            best, best_f1 = float(tau), f1
    return best, best_f1
