"""Voxel grids, sparse voxel tensors and occupancy targets."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import BoundsError, ConfigError, ConsistencyError


@dataclass(frozen=True)
class GridConfig:
    """Regular grid of ``dims`` voxels of ``voxel_size`` starting at ``min_corner``.

    Default: 64 x 64 x 16 voxels of 1.6 x 1.6 x 0.5 m around a sensor at the
    origin, so that all three range bands (0-30, 30-50, >50 m) are populated.
    """

    min_corner: Tuple[float, float, float] = (-51.2, -51.2, -3.0)
    voxel_size: Tuple[float, float, float] = (1.6, 1.6, 0.5)
    dims: Tuple[int, int, int] = (64, 64, 16)

    def __post_init__(self):
        if len(self.min_corner) != 3 or len(self.voxel_size) != 3 or len(self.dims) != 3:
            raise ConfigError("grid: min_corner, voxel_size and dims need 3 components each")
        if not all(np.isfinite(self.min_corner)):
            raise ConfigError(f"min_corner: must be finite, got {self.min_corner}")
        if any(not (v > 0 and np.isfinite(v)) for v in self.voxel_size):
            raise ConfigError(f"voxel_size: components must be > 0, got {self.voxel_size}")
        if any(int(d) != d or d < 1 for d in self.dims):
            raise ConfigError(f"dims: components must be integers >= 1, got {self.dims}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "min_corner", tuple(float(v) for v in self.min_corner))
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))

    @property
    def n_voxels(self) -> int:
        W, H, D = self.dims
        return W * H * D

    @property
    def max_corner(self):
        return tuple(m + v * d for m, v, d in zip(self.min_corner, self.voxel_size, self.dims))


@dataclass
class SparseVoxelTensor:
    """Coordinate list ``(N, 3)`` with matching features ``(N, C)`` on a grid of ``dims``."""

    coords: np.ndarray
    features: np.ndarray
    dims: Tuple[int, int, int]

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ConsistencyError(f"features must be 2-D, got shape {self.features.shape}")
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.coords) != len(self.features):
            raise ConsistencyError(
                f"{len(self.coords)} coords but {len(self.features)} feature rows"
            )

    @property
    def n_channels(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return len(self.coords)

    def linear_indices(self):
        return ravel_coords(self.coords, self.dims)

    def validate(self):
        if len(self.coords):
            if (self.coords < 0).any() or (self.coords >= np.asarray(self.dims)).any():
                raise BoundsError(f"coordinate outside dims {self.dims}")
            if len(np.unique(self.linear_indices())) != len(self.coords):
                raise ConsistencyError("duplicate coordinates")
        if not np.isfinite(self.features).all():
            raise ConsistencyError("non-finite features")
        return self


@dataclass
class OccupancyTarget:
    """Sorted linear indices of occupied voxels out of ``n_voxels``."""

    occupied: np.ndarray
    n_voxels: int

    def __post_init__(self):
        self.occupied = np.asarray(self.occupied, dtype=np.int64)

    @property
    def n_occupied(self) -> int:
        return len(self.occupied)

    def to_dense(self, dims) -> np.ndarray:
        out = np.zeros(self.n_voxels, dtype=bool)
        out[self.occupied] = True
        return out.reshape(dims)


def ravel_coords(coords, dims):
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    _, H, D = dims
    return (coords[:, 0] * H + coords[:, 1]) * D + coords[:, 2]


def unravel_index(index, dims):
    index = np.asarray(index, dtype=np.int64)
    _, H, D = dims
    return np.stack([index // (H * D), (index // D) % H, index % D], axis=-1)


def _check_coord(grid, coord):
    c = np.asarray(coord, dtype=np.int64)
    if c.shape[-1] != 3 or (c < 0).any() or (c >= np.asarray(grid.dims)).any():
        raise BoundsError(f"coordinate {coord} outside grid dims {grid.dims}")
    return c


def voxel_center(grid: GridConfig, coord) -> np.ndarray:
    c = _check_coord(grid, coord)
    return np.asarray(grid.min_corner) + (c + 0.5) * np.asarray(grid.voxel_size)


def linear_index(grid: GridConfig, coord):
    c = _check_coord(grid, coord)
    out = ravel_coords(c, grid.dims)
    return int(out[0]) if c.ndim == 1 else out


def coord_of(grid: GridConfig, index):
    index = np.asarray(index, dtype=np.int64)
    if (index < 0).any() or (index >= grid.n_voxels).any():
        raise BoundsError(f"linear index outside [0, {grid.n_voxels})")
    out = unravel_index(index, grid.dims)
    return tuple(int(v) for v in out) if out.ndim == 1 else out


def range_of(grid: GridConfig, coord, sensor_origin=(0.0, 0.0, 0.0), metric="xy"):
    """Distance from ``sensor_origin`` to the voxel center; ``metric`` is ``"xy"`` or ``"xyz"``."""
    center = voxel_center(grid, coord)
    delta = center - np.asarray(sensor_origin, dtype=np.float64)
    if metric == "xy":
        delta = delta[..., :2]
    elif metric != "xyz":
        raise ConfigError(f"range metric must be 'xy' or 'xyz', got {metric!r}")
    r = np.sqrt((delta ** 2).sum(axis=-1))
    return float(r) if np.ndim(r) == 0 else r


def voxelize(cloud, grid: GridConfig):
    """Mean-pool points into voxels.

    Returns the 4-channel :class:`SparseVoxelTensor` (coords sorted by linear
    index) and the :class:`OccupancyTarget`. Points outside the half-open grid
    extents are dropped.
    """
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 4)
    lo = np.asarray(grid.min_corner)
    size = np.asarray(grid.voxel_size)
    dims = np.asarray(grid.dims)
    idx = np.floor((cloud[:, :3] - lo) / size).astype(np.int64) if len(cloud) else np.zeros((0, 3), np.int64)
    inside = ((idx >= 0) & (idx < dims)).all(axis=1)
    idx, pts = idx[inside], cloud[inside]

    lin = ravel_coords(idx, grid.dims)
    occupied, inverse, counts = np.unique(lin, return_inverse=True, return_counts=True)
    sums = np.zeros((len(occupied), 4))
    np.add.at(sums, inverse, pts)
    features = sums / np.maximum(counts, 1)[:, None]
    tensor = SparseVoxelTensor(unravel_index(occupied, grid.dims), features, grid.dims)
    return tensor, OccupancyTarget(occupied, grid.n_voxels)


def voxel_ranges(grid: GridConfig, linear, sensor_origin=(0.0, 0.0, 0.0), metric="xy"):
    """Vectorised :func:`range_of` for an array of linear indices."""
    linear = np.asarray(linear, dtype=np.int64)
    if len(linear) == 0:
        return np.zeros(0)
    return np.atleast_1d(range_of(grid, unravel_index(linear, grid.dims), sensor_origin, metric))


class Voxelizer(TransformerMixin, BaseEstimator):
    """Stateless transformer: point clouds -> ``(SparseVoxelTensor, OccupancyTarget)`` pairs."""

    def __init__(self, grid: Optional[GridConfig] = None):
        self.grid = grid

    def fit(self, X=None, y=None):
        self.grid_ = self.grid if self.grid is not None else GridConfig()
        return self

    def transform(self, X):
        grid = getattr(self, "grid_", None) or self.grid or GridConfig()
        return [voxelize(cloud, grid) for cloud in X]
