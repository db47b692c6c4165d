"""Synthetic LiDAR scenes and KITTI-style ``.bin`` point files."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError, FormatError

RECORD_BYTES = 16
_POINT_DTYPE = np.dtype("<f4")

# Elevation set of a 32-beam spinning sensor, degrees.
DEFAULT_ELEVATIONS = tuple(float(e) for e in np.linspace(-24.8, 2.0, 32))


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by its min and max corners (meters)."""

    lo: Tuple[float, float, float]
    hi: Tuple[float, float, float]

    def __post_init__(self):
        if len(self.lo) != 3 or len(self.hi) != 3:
            raise ConfigError("objects: box corners must have 3 components")
        if any(not (a < b) for a, b in zip(self.lo, self.hi)):
            raise ConfigError(f"objects: degenerate box {self.lo} -> {self.hi}")


@dataclass(frozen=True)
class SceneSpec:
    sensor_origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    num_rays: int = 32 * 1024
    max_range: float = 80.0
    objects: Tuple[Box, ...] = ()
    ground_z: Optional[float] = -1.73
    dropout_per_band: Tuple[float, float, float] = (0.0, 0.2, 0.4)
    band_edges: Tuple[float, float] = (30.0, 50.0)
    noise_sigma: float = 0.02
    seed: int = 0
    elevations: Tuple[float, ...] = field(default=DEFAULT_ELEVATIONS, repr=False)

    def validate(self):
        if len(self.sensor_origin) != 3 or not all(map(math.isfinite, self.sensor_origin)):
            raise ConfigError("sensor_origin: expected 3 finite values")
        if int(self.num_rays) != self.num_rays or self.num_rays < 0:
            raise ConfigError(f"num_rays: must be a non-negative integer, got {self.num_rays}")
        if not (math.isfinite(self.max_range) and self.max_range > 0):
            raise ConfigError(f"max_range: must be > 0, got {self.max_range}")
        if len(self.dropout_per_band) != 3 or any(
            not (0.0 <= p <= 1.0) for p in self.dropout_per_band
        ):
            raise ConfigError(f"dropout_per_band: need three probabilities in [0,1], got {self.dropout_per_band}")
        if len(self.band_edges) != 2 or not (0 < self.band_edges[0] < self.band_edges[1]):
            raise ConfigError(f"band_edges: need 0 < near < far, got {self.band_edges}")
        if not (math.isfinite(self.noise_sigma) and self.noise_sigma >= 0):
            raise ConfigError(f"noise_sigma: must be >= 0, got {self.noise_sigma}")
        if self.ground_z is not None and not math.isfinite(self.ground_z):
            raise ConfigError("ground_z: must be finite")
        if len(self.elevations) == 0:
            raise ConfigError("elevations: need at least one beam")
        for obj in self.objects:
            if not isinstance(obj, Box):
                raise ConfigError(f"objects: expected Box, got {type(obj).__name__}")
        return self


def ray_directions(num_rays, elevations):
    """Unit directions: ray ``k`` uses beam ``k % n_beams`` at azimuth ring ``k // n_beams``."""
    n_beams = len(elevations)
    k = np.arange(num_rays)
    n_az = max(1, -(-num_rays // n_beams))
    elev = np.radians(np.asarray(elevations, dtype=np.float64))[k % n_beams]
    az = 2.0 * np.pi * (k // n_beams) / n_az
    ce = np.cos(elev)
    return np.stack([ce * np.cos(az), ce * np.sin(az), np.sin(elev)], axis=1)


def _box_hits(origin, dirs, box):
    """Slab test; returns entry distance per ray (inf on miss)."""
    lo = np.asarray(box.lo, dtype=np.float64) - origin
    hi = np.asarray(box.hi, dtype=np.float64) - origin
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = lo * inv
        t2 = hi * inv
    # rays parallel to a slab: inside -> (-inf, inf), outside -> empty
    parallel = dirs == 0.0
    inside = (lo <= 0.0) & (hi >= 0.0)
    t1 = np.where(parallel, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(parallel, np.where(inside, np.inf, -np.inf), t2)
    tmin = np.minimum(t1, t2).max(axis=1)
    tmax = np.maximum(t1, t2).min(axis=1)
    hit = (tmax >= tmin) & (tmax > 0.0)
    t = np.where(tmin > 0.0, tmin, tmax)
    return np.where(hit, t, np.inf)


def band_index(ranges, band_edges=(30.0, 50.0)):
    """0 for [0, near), 1 for [near, far), 2 for [far, inf)."""
    return np.searchsorted(np.asarray(band_edges, dtype=np.float64), ranges, side="right")


def generate_scene(spec: SceneSpec) -> np.ndarray:
    """Ray-cast ``spec`` into an ``(N, 4)`` float32 array of (x, y, z, intensity).

    Each ray takes its first hit against the ground plane and the boxes. Range
    noise is applied along the ray, then points are dropped with the
    probability of their XY range band.
    """
    spec.validate()
    if spec.num_rays == 0:
        return np.zeros((0, 4), dtype=np.float32)
    rng = np.random.Generator(np.random.PCG64(int(spec.seed) & ((1 << 64) - 1)))
    origin = np.asarray(spec.sensor_origin, dtype=np.float64)
    dirs = ray_directions(int(spec.num_rays), spec.elevations)

    t = np.full(len(dirs), np.inf)
    if spec.ground_z is not None:
        dz = dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = (spec.ground_z - origin[2]) / dz
        t = np.where((dz != 0.0) & (tg > 0.0), tg, t)
    for box in spec.objects:
        t = np.minimum(t, _box_hits(origin, dirs, box))

    noise = rng.normal(0.0, spec.noise_sigma, size=len(dirs)) if spec.noise_sigma > 0 else 0.0
    keep_draw = rng.random(len(dirs))
    t = t + noise
    valid = np.isfinite(t) & (t > 0.0) & (t <= spec.max_range)

    pts = origin + dirs * np.where(valid, t, 0.0)[:, None]
    xy_range = np.hypot(pts[:, 0] - origin[0], pts[:, 1] - origin[1])
    drop_p = np.asarray(spec.dropout_per_band, dtype=np.float64)[band_index(xy_range, spec.band_edges)]
    valid &= keep_draw >= drop_p

    pts = pts[valid]
    rng_3d = t[valid]
    intensity = np.clip(1.0 / (1.0 + rng_3d / 10.0), 0.0, 1.0)
    cloud = np.column_stack([pts, intensity]).astype(np.float32)
    # float32 rounding can push a point a hair past max_range
    d = np.linalg.norm(cloud[:, :3].astype(np.float64) - origin, axis=1)
    return cloud[d <= spec.max_range]


def random_scene_spec(base: SceneSpec, seed: int, num_boxes: int = 8) -> SceneSpec:
    """``base`` plus ``num_boxes`` randomly placed car- and building-sized boxes."""
    rng = np.random.Generator(np.random.PCG64(int(seed) & ((1 << 64) - 1)))
    ground = base.ground_z if base.ground_z is not None else base.sensor_origin[2] - 1.73
    boxes = list(base.objects)
    for _ in range(num_boxes):
        r = rng.uniform(5.0, 0.8 * base.max_range)
        phi = rng.uniform(0.0, 2.0 * np.pi)
        if rng.random() < 0.7:
            size = (rng.uniform(3.5, 5.0), rng.uniform(1.6, 2.0), rng.uniform(1.4, 1.8))
        else:
            size = (rng.uniform(6.0, 15.0), rng.uniform(6.0, 15.0), rng.uniform(4.0, 8.0))
        cx = base.sensor_origin[0] + r * np.cos(phi)
        cy = base.sensor_origin[1] + r * np.sin(phi)
        boxes.append(
            Box(
                lo=(float(cx - size[0] / 2), float(cy - size[1] / 2), float(ground)),
                hi=(float(cx + size[0] / 2), float(cy + size[1] / 2), float(ground + size[2])),
            )
        )
    return replace(base, objects=tuple(boxes), seed=int(seed))


def band_counts(cloud, sensor_origin=(0.0, 0.0, 0.0), band_edges=(30.0, 50.0)):
    """Point count per XY range band."""
    cloud = np.asarray(cloud)
    if len(cloud) == 0:
        return np.zeros(3, dtype=np.int64)
    r = np.hypot(cloud[:, 0] - sensor_origin[0], cloud[:, 1] - sensor_origin[1])
    return np.bincount(band_index(r, band_edges), minlength=3).astype(np.int64)


def write_points(cloud, path):
    cloud = np.asarray(cloud)
    if cloud.ndim != 2 or cloud.shape[1] != 4:
        raise DataError(f"expected an (N, 4) point array, got shape {cloud.shape}")
    data = np.ascontiguousarray(cloud, dtype=_POINT_DTYPE).tobytes()
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_points(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) % RECORD_BYTES:
        offset = len(raw) - len(raw) % RECORD_BYTES
        raise FormatError(
            f"{path}: truncated point file ({len(raw)} bytes is not a multiple of "
            f"{RECORD_BYTES}); partial record starts at byte offset {offset}",
            offset=offset,
        )
    cloud = np.frombuffer(raw, dtype=_POINT_DTYPE).reshape(-1, 4).astype(np.float32)
    bad = ~np.isfinite(cloud)
    if bad.any():
        flat = int(np.flatnonzero(bad.ravel())[0])
        raise DataError(f"{path}: non-finite value at record {flat // 4} (byte offset {flat * 4})")
    return cloud
