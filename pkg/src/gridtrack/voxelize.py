"""Voxel binning and the parameter-free per-voxel mean encoder.

A cloud is binned by floor division against the voxel edge lengths after
shifting by the extent minimum; per-voxel features are the mean coordinates
of the member points, computed per frame and concatenated previous-first.
Points within a voxel are reduced in a canonical (sorted) order so results
are independent of input point order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import GridTrackError, PointCloud, ValidationError


class ConfigError(GridTrackError):
    """Raised for invalid or mismatched configuration."""


def _grid_dim(span: float, edge: float) -> int:
    """Number of voxels covering ``span``, robust to float noise near integers."""
    ratio = span / edge
    nearest = round(ratio)
    if abs(ratio - nearest) < 1e-9:
        return max(1, int(nearest))
    return max(1, int(math.ceil(ratio)))


@dataclass
class VoxelizerConfig:
    """Grid geometry shared by both scales.

    Attributes:
        voxel_size: small-scale voxel edges (meters) per axis.
        extent: ((min_x, max_x), (min_y, max_y), (min_z, max_z)) in meters.
        scale_ratio: large-voxel edge as a multiple of the small edge (> 1).
    """

    voxel_size: tuple[float, float, float] = (0.1, 0.1, 0.1)
    extent: tuple[tuple[float, float], ...] = ((-3.2, 3.2), (-3.2, 3.2), (-2.0, 2.0))
    scale_ratio: float = 2.0

    def __post_init__(self):
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        self.extent = tuple((float(lo), float(hi)) for lo, hi in self.extent)
        if len(self.voxel_size) != 3 or len(self.extent) != 3:
            raise ConfigError("voxel_size and extent must have 3 axes")
        if any(v <= 0 for v in self.voxel_size):
            raise ConfigError(f"voxel_size must be positive, got {self.voxel_size}")
        if any(hi <= lo for lo, hi in self.extent):
            raise ConfigError(f"extent max must exceed min, got {self.extent}")
        if self.scale_ratio <= 1.0:
            raise ConfigError(f"scale_ratio must be > 1, got {self.scale_ratio}")

    @property
    def mins(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.extent])

    def edges(self, scale: float = 1.0) -> np.ndarray:
        return np.array(self.voxel_size) * scale

    def dims(self, scale: float = 1.0) -> tuple[int, int, int]:
        edges = self.edges(scale)
        return tuple(
            _grid_dim(hi - lo, edges[i]) for i, (lo, hi) in enumerate(self.extent)
        )


@dataclass
class VoxelGrid:
    """Sparse occupancy of a voxel grid with per-voxel features.

    ``coords`` rows are sorted by flat index and unique. ``features`` is None
    until :func:`encode_dynamic` runs; until then the binned raw points are
    kept in ``raw_points`` (sorted canonically) with per-voxel ``segments``
    start offsets.
    """

    dims: tuple[int, int, int]
    coords: np.ndarray                     # (N, 3) int64
    counts: np.ndarray                     # (N,) points per voxel
    features: np.ndarray | None = None     # (N, C) after encoding
    raw_points: np.ndarray | None = None   # (M, C_raw) before encoding
    segments: np.ndarray | None = None     # (N,) start offsets into raw_points
    dropped: int = 0

    @property
    def num_voxels(self) -> int:
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        if self.features is None:
            raise ValidationError("grid not encoded yet")
        return self.features.shape[1]

    def flat_coords(self) -> np.ndarray:
        w, l, h = self.dims
        return (self.coords[:, 0] * l + self.coords[:, 1]) * h + self.coords[:, 2]

    def feature_map(self) -> dict[tuple[int, int, int], np.ndarray]:
        """Occupied-voxel view as a {(i, j, k): feature} dict."""
        return {tuple(c): f for c, f in zip(map(tuple, self.coords), self.features)}

    def count_map(self) -> dict[tuple[int, int, int], int]:
        return {tuple(c): int(n) for c, n in zip(map(tuple, self.coords), self.counts)}


def voxelize(cloud: PointCloud, cfg: VoxelizerConfig, scale: float = 1.0) -> VoxelGrid:
    """Bin a cloud into voxels at the given scale multiple of ``cfg.voxel_size``.

    Out-of-extent points are dropped and counted. The result is independent
    of input point order: member points are stored sorted by (voxel, x, y, z).
    """
    dims = cfg.dims(scale)
    edges = cfg.edges(scale)
    mins = cfg.mins
    xyz = cloud.xyz
    if len(cloud) == 0:
        return _empty_grid(dims)

    idx = np.floor((xyz - mins) / edges).astype(np.int64)
    in_extent = np.logical_and(idx >= 0, idx < np.array(dims)).all(axis=1)
    idx = idx[in_extent]
    pts = xyz[in_extent]
    dropped = int(len(cloud) - pts.shape[0])
    if pts.shape[0] == 0:
        grid = _empty_grid(dims)
        grid.dropped = dropped
        return grid

    w, l, h = dims
    flat = (idx[:, 0] * l + idx[:, 1]) * h + idx[:, 2]
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], flat))
    flat = flat[order]
    pts = pts[order]
    starts = np.flatnonzero(np.r_[True, flat[1:] != flat[:-1]])
    counts = np.diff(np.r_[starts, flat.shape[0]])
    uniq = flat[starts]
    coords = np.column_stack([uniq // (l * h), (uniq // h) % l, uniq % h])
    return VoxelGrid(dims, coords, counts, raw_points=pts, segments=starts,
                     dropped=dropped)


def _empty_grid(dims, channels: int | None = None) -> VoxelGrid:
    grid = VoxelGrid(
        dims,
        np.zeros((0, 3), dtype=np.int64),
        np.zeros(0, dtype=np.int64),
        raw_points=np.zeros((0, 3)),
        segments=np.zeros(0, dtype=np.int64),
    )
    if channels is not None:
        grid.features = np.zeros((0, channels))
        grid.raw_points = None
        grid.segments = None
    return grid


def encode_dynamic(grid: VoxelGrid) -> VoxelGrid:
    """Replace every voxel's raw channels with their per-voxel mean.

    Point counts are preserved exactly; no point is discarded. The mean is an
    exact, lossless stand-in for reassigning the average back to each member
    point, since all members then share one value.
    """
    if grid.raw_points is None:
        raise ValidationError("grid has no raw points to encode")
    if grid.num_voxels == 0:
        out = _empty_grid(grid.dims, channels=grid.raw_points.shape[1] or 3)
        out.dropped = grid.dropped
        return out
    sums = np.add.reduceat(grid.raw_points, grid.segments, axis=0)
    means = sums / grid.counts[:, None]
    return VoxelGrid(grid.dims, grid.coords.copy(), grid.counts.copy(),
                     features=means, dropped=grid.dropped)


def fuse_frames(prev: VoxelGrid, cur: VoxelGrid) -> VoxelGrid:
    """Channel-concatenate two encoded grids, previous frame first.

    Occupancy is the union; a voxel seen in only one frame carries zeros in
    the other frame's channel block.
    """
    if prev.dims != cur.dims:
        raise ConfigError(f"grid dims differ: {prev.dims} vs {cur.dims}")
    if prev.features is None or cur.features is None:
        raise ValidationError("fuse_frames requires encoded grids")
    cp, cc = prev.features.shape[1], cur.features.shape[1]
    all_flat = np.concatenate([prev.flat_coords(), cur.flat_coords()])
    union = np.unique(all_flat)
    w, l, h = prev.dims
    coords = np.column_stack([union // (l * h), (union // h) % l, union % h])
    feats = np.zeros((union.shape[0], cp + cc))
    counts = np.zeros(union.shape[0], dtype=np.int64)
    pos_prev = np.searchsorted(union, prev.flat_coords())
    pos_cur = np.searchsorted(union, cur.flat_coords())
    feats[pos_prev, :cp] = prev.features
    feats[pos_cur, cp:] = cur.features
    np.add.at(counts, pos_prev, prev.counts)
    np.add.at(counts, pos_cur, cur.counts)
    return VoxelGrid(prev.dims, coords, counts, features=feats,
                     dropped=prev.dropped + cur.dropped)


def dual_voxelize(prev: PointCloud, cur: PointCloud,
                  cfg: VoxelizerConfig) -> tuple[VoxelGrid, VoxelGrid]:
    """Produce the (large, small) two-frame fused grids for both scales."""
    small = fuse_frames(encode_dynamic(voxelize(prev, cfg)),
                        encode_dynamic(voxelize(cur, cfg)))
    large = fuse_frames(encode_dynamic(voxelize(prev, cfg, cfg.scale_ratio)),
                        encode_dynamic(voxelize(cur, cfg, cfg.scale_ratio)))
    return large, small
