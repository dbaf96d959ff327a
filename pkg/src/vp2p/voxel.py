"""Sparse voxel grids and voxel-to-point feature gathering.

Voxel ``(i, j, k)`` covers ``origin + [i, i+1) * size`` along each axis and
its center sits at ``origin + (index + 0.5) * size``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

_KEY_BITS = 21
_KEY_OFFSET = 1 << (_KEY_BITS - 1)
_KEY_MASK = (1 << _KEY_BITS) - 1

DEFAULT_VOXEL_SIZE = 0.3


def _pack(idx: np.ndarray) -> np.ndarray:
    """Pack integer 3-indices into sortable int64 keys."""
    idx = np.asarray(idx, dtype=np.int64) + _KEY_OFFSET
    if np.any(idx < 0) or np.any(idx > _KEY_MASK):
        raise OverflowError("voxel index outside the packable range (+-2^20)")
    return (idx[..., 0] << (2 * _KEY_BITS)) | (idx[..., 1] << _KEY_BITS) | idx[..., 2]


@dataclass(frozen=True)
class SparseVoxelGrid:
    """Occupied voxels only, sorted by packed key.

    ``indices`` is ``(V, 3)`` int, ``point_count`` is ``(V,)`` and
    ``features`` is ``(V, C)`` or ``None`` before features are scattered in.
    """

    origin: np.ndarray
    voxel_size: float
    indices: np.ndarray
    point_count: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        object.__setattr__(self, "_keys", _pack(self.indices))

    def __len__(self) -> int:
        return int(self.indices.shape[0])

    def centers(self) -> np.ndarray:
        return self.origin + (self.indices + 0.5) * self.voxel_size

    def lookup(self, idx: np.ndarray) -> np.ndarray:
        """Row of each queried 3-index in the grid, or -1 when unoccupied."""
        keys = _pack(idx)
        pos = np.searchsorted(self._keys, keys)
        pos = np.clip(pos, 0, max(len(self) - 1, 0))
        found = (len(self) > 0) & (self._keys[pos] == keys)
        return np.where(found, pos, -1)

    def with_features(self, features: np.ndarray) -> SparseVoxelGrid:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != len(self):
            raise DimensionError(f"need one feature row per voxel ({len(self)}), got {features.shape}")
        return SparseVoxelGrid(self.origin, self.voxel_size, self.indices, self.point_count, features)

    def to_csv(self) -> str:
        """Debug dump: ``ix,iy,iz,point_count,feature[0..C)``."""
        C = 0 if self.features is None else self.features.shape[1]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["ix", "iy", "iz", "point_count"] + [f"feature[{c}]" for c in range(C)])
        for v in range(len(self)):
            row = [int(x) for x in self.indices[v]] + [int(self.point_count[v])]
            if C:
                row += [repr(float(x)) for x in self.features[v]]
            writer.writerow(row)
        return buf.getvalue()


def voxelize(points: np.ndarray, voxel_size: float = DEFAULT_VOXEL_SIZE, origin=(0.0, 0.0, 0.0)):
    """Bucket points into voxels.

    Returns ``(grid, point_voxel)`` where ``point_voxel[i]`` is the grid row
    holding point ``i``.
    """
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    bad = np.flatnonzero(~np.all(np.isfinite(pts), axis=1))
    if bad.size:
        raise ValueError(f"non-finite coordinates at point index {int(bad[0])}")
    origin = np.asarray(origin, dtype=np.float64)
    idx = np.floor((pts - origin) / voxel_size).astype(np.int64)
    keys = _pack(idx)
    uniq, first, inverse, counts = np.unique(keys, return_index=True, return_inverse=True, return_counts=True)
    grid = SparseVoxelGrid(origin, float(voxel_size), idx[first], counts.astype(np.int64))
    return grid, inverse.reshape(-1)


def scatter_point_features(grid: SparseVoxelGrid, features: np.ndarray, point_voxel: np.ndarray) -> SparseVoxelGrid:
    """Average member-point features into each occupied voxel."""
    features = np.asarray(features, dtype=np.float64)
    point_voxel = np.asarray(point_voxel)
    if features.ndim != 2 or features.shape[0] != point_voxel.shape[0]:
        raise DimensionError(
            f"feature rows ({features.shape[0] if features.ndim else 0}) must match point count ({point_voxel.shape[0]})"
        )
    sums = np.zeros((len(grid), features.shape[1]))
    np.add.at(sums, point_voxel, features)
    counts = np.bincount(point_voxel, minlength=len(grid))
    if not np.array_equal(counts, grid.point_count):
        raise ValueError("point-to-voxel assignment disagrees with grid occupancy")
    return grid.with_features(sums / counts[:, None])


def trilinear_weights(grid: SparseVoxelGrid, points: np.ndarray):
    """Neighbor voxel indices ``(N, 8, 3)`` and weights ``(N, 8)`` per point."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    g = (pts - grid.origin) / grid.voxel_size - 0.5
    # centers computed as origin + (i + 0.5) * size come back a few ulps off
    # the lattice; snap them so center probes hit exactly one voxel
    r = np.round(g)
    scale = (np.abs(pts) + np.abs(grid.origin)) / grid.voxel_size + np.abs(g) + 1.0
    g = np.where(np.abs(g - r) <= 16 * np.finfo(float).eps * scale, r, g)
    base = np.floor(g)
    frac = g - base
    corners = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64)
    nbr = base.astype(np.int64)[:, None, :] + corners[None, :, :]
    w = np.where(corners[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
    return nbr, np.prod(w, axis=2)


def trilinear_gather(grid: SparseVoxelGrid, points: np.ndarray) -> np.ndarray:
    """Interpolate voxel features at each point from its 8 surrounding centers.

    Unoccupied neighbours contribute zero with their weight unchanged.
    """
    if grid.features is None:
        raise ValueError("grid has no features; call scatter_point_features first")
    nbr, w = trilinear_weights(grid, points)
    rows = grid.lookup(nbr)
    occupied = rows >= 0
    feats = grid.features[np.where(occupied, rows, 0)]
    return np.einsum("nk,nkc->nc", w * occupied, feats)


def l2_normalize(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), eps)


def fuse_3d_features(f_point: np.ndarray, f_voxel: np.ndarray) -> np.ndarray:
    """Point-branch plus gathered voxel features, rows L2-normalized."""
    f_point = np.asarray(f_point, dtype=np.float64)
    f_voxel = np.asarray(f_voxel, dtype=np.float64)
    if f_point.shape != f_voxel.shape:
        raise DimensionError(f"shape mismatch: {f_point.shape} vs {f_voxel.shape}")
    return l2_normalize(f_point + f_voxel)
