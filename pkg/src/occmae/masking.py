"""Range-aware random masking of occupied voxels."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import ConfigError, ConsistencyError
from .scene import band_index
from .voxel import GridConfig, OccupancyTarget, SparseVoxelTensor, voxel_ranges

MASK_MODES = ("range_aware", "uniform")


@dataclass(frozen=True)
class MaskConfig:
    band_edges: Tuple[float, float] = (30.0, 50.0)
    ratios: Tuple[float, float, float] = (0.9, 0.7, 0.5)
    seed: int = 0
    mode: str = "range_aware"
    range_metric: str = "xy"

    def validate(self):
        if self.mode not in MASK_MODES:
            raise ConfigError(f"mask_mode: expected one of {MASK_MODES}, got {self.mode!r}")
        if len(self.ratios) != 3 or any(not (0.0 <= r <= 1.0) for r in self.ratios):
            raise ConfigError(f"ratios: need three values in [0,1], got {self.ratios}")
        if len(self.band_edges) != 2 or not (0 < self.band_edges[0] < self.band_edges[1]):
            raise ConfigError(f"band_edges: need 0 < near < far, got {self.band_edges}")
        if self.range_metric not in ("xy", "xyz"):
            raise ConfigError(f"range_metric: expected 'xy' or 'xyz', got {self.range_metric!r}")
        r1, r2, r3 = self.ratios
        if self.mode == "range_aware" and not (r1 >= r2 >= r3):
            warnings.warn(
                f"range-aware ratios {self.ratios} are not descending with range", stacklevel=2
            )
        return self


@dataclass
class MaskPlan:
    visible: np.ndarray  # sorted linear indices
    masked: np.ndarray  # sorted linear indices
    band_counts: Tuple[int, int, int]
    masked_counts: Tuple[int, int, int]

    @property
    def n_un(self) -> int:
        return len(self.visible)


def masked_count(ratio, n):
    """Round-half-up of ``ratio * n``."""
    return int(math.floor(ratio * n + 0.5))


def expected_n_un(band_counts, ratios):
    return sum(n - masked_count(r, n) for n, r in zip(band_counts, ratios))


def plan_mask(target: OccupancyTarget, grid: GridConfig, sensor_origin, cfg: MaskConfig) -> MaskPlan:
    """Split the occupied voxels into visible and masked sets.

    Each range band ``b`` (by voxel-center distance) loses exactly
    ``floor(r_b * n_b + 0.5)`` voxels drawn uniformly without replacement. In
    uniform mode all occupied voxels form a single pool masked at ``ratios[0]``.
    """
    cfg.validate()
    occupied = np.sort(np.asarray(target.occupied, dtype=np.int64))
    bands = band_index(voxel_ranges(grid, occupied, sensor_origin, cfg.range_metric), cfg.band_edges)
    band_counts = tuple(int(c) for c in np.bincount(bands, minlength=3))
    rng = np.random.Generator(np.random.PCG64(int(cfg.seed) & ((1 << 64) - 1)))

    is_masked = np.zeros(len(occupied), dtype=bool)
    if cfg.mode == "uniform":
        k = masked_count(cfg.ratios[0], len(occupied))
        is_masked[rng.permutation(len(occupied))[:k]] = True
    else:
        for b in range(3):
            members = np.flatnonzero(bands == b)
            k = masked_count(cfg.ratios[b], len(members))
            is_masked[members[rng.permutation(len(members))[:k]]] = True

    masked_counts = tuple(int(c) for c in np.bincount(bands[is_masked], minlength=3))
    return MaskPlan(occupied[~is_masked], occupied[is_masked], band_counts, masked_counts)


def apply_mask(tensor: SparseVoxelTensor, plan: MaskPlan) -> SparseVoxelTensor:
    """Keep only the rows of ``tensor`` listed in ``plan.visible``."""
    lin = tensor.linear_indices()
    order = np.argsort(lin, kind="stable")
    pos = np.searchsorted(lin[order], plan.visible)
    pos = np.minimum(pos, max(len(lin) - 1, 0))
    if len(plan.visible) and (len(lin) == 0 or (lin[order][pos] != plan.visible).any()):
        raise ConsistencyError("mask plan references voxels absent from the tensor")
    rows = np.sort(order[pos]) if len(plan.visible) else np.zeros(0, dtype=np.int64)
    return SparseVoxelTensor(tensor.coords[rows], tensor.features[rows], tensor.dims)


class RangeAwareMasker(TransformerMixin, BaseEstimator):
    """Transformer over ``(tensor, target)`` pairs returning ``(visible_tensor, plan)`` pairs.

    Scene ``i`` of a call is masked with seed ``seed + i``.
    """

    def __init__(self, grid=None, ratios=(0.9, 0.7, 0.5), band_edges=(30.0, 50.0),
                 mode="range_aware", sensor_origin=(0.0, 0.0, 0.0), range_metric="xy", seed=0):
        self.grid = grid
        self.ratios = ratios
        self.band_edges = band_edges
        self.mode = mode
        self.sensor_origin = sensor_origin
        self.range_metric = range_metric
        self.seed = seed

    def fit(self, X=None, y=None):
        self.config_ = MaskConfig(tuple(self.band_edges), tuple(self.ratios), int(self.seed),
                                  self.mode, self.range_metric).validate()
        self.grid_ = self.grid if self.grid is not None else GridConfig()
        return self

    def transform(self, X):
        if not hasattr(self, "config_"):
            self.fit()
        out = []
        for i, (tensor, target) in enumerate(X):
            cfg = replace(self.config_, seed=int(self.seed) + i)
            plan = plan_mask(target, self.grid_, self.sensor_origin, cfg)
            out.append((apply_mask(tensor, plan), plan))
        return out
