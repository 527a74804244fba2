"""Sparse voxelization of point clouds at a ladder of resolutions.

Voxel keys are true floor divisions of coordinates by the voxel edge
length, so points with negative coordinates land in negative keys instead
of aliasing around zero. Grids store one feature row per occupied voxel,
reduced by the arithmetic mean, with rows ordered by ascending
lexicographic key. Reduction runs on a deterministic sort-and-group of the
input, which makes results reproducible for a fixed input ordering.

Feature arguments may be numpy arrays or autodiff tensors; with tensors
the mean pooling and the gather back to points propagate gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError, VoxelLookupError
from .geometry import PixelMapping, PointCloud
from .tensor import Tensor, gather_rows, segment_mean

__all__ = [
    "SparseVoxelGrid",
    "VoxelMapping",
    "build_voxel_mapping",
    "devoxelize",
    "filter_point_features_to_fov",
    "voxelize",
]


@dataclass
class VoxelMapping:
    """Per-point integer voxel keys at one resolution of the ladder."""

    keys: np.ndarray
    resolution: float
    scale_index: int = 1

    def __post_init__(self) -> None:
        self.keys = np.asarray(self.keys, dtype=np.int64)
        if self.keys.ndim != 2 or self.keys.shape[1] != 3:
            raise ShapeError(f"keys must be (N, 3), got {self.keys.shape}")
        if not self.resolution > 0.0:
            raise ValidationError("voxel resolution must be positive")
        if self.scale_index < 1:
            raise ValidationError("scale_index counts from 1")

    def __len__(self) -> int:
        return self.keys.shape[0]


@dataclass
class SparseVoxelGrid:
    """Occupied voxels with mean-pooled features.

    ``table`` maps an integer key triple to its feature row, ``features``
    holds one row per voxel in ascending lexicographic key order, and
    ``counts`` the number of contributing points per voxel.
    """

    table: dict
    features: object
    counts: np.ndarray
    resolution: float

    @property
    def num_voxels(self) -> int:
        return len(self.counts)


def build_voxel_mapping(cloud: PointCloud, resolution: float, scale_index: int = 1) -> VoxelMapping:
    """Assign every point its voxel key at the given resolution."""
    if not resolution > 0.0:
        raise ValidationError("voxel resolution must be positive")
    keys = np.floor(cloud.coords / resolution).astype(np.int64)
    return VoxelMapping(keys=keys, resolution=resolution, scale_index=scale_index)


def _group(mapping: VoxelMapping):
    """Unique keys in ascending lexicographic order plus per-point segments."""
    unique_keys, inverse = np.unique(mapping.keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse, minlength=len(unique_keys))
    return unique_keys, inverse, counts


def voxelize(point_features, mapping: VoxelMapping) -> SparseVoxelGrid:
    """Mean-pool per-point features into the occupied voxels of a mapping."""
    n = len(mapping)
    rows = point_features.shape[0]
    if rows != n:
        raise ShapeError(f"features have {rows} rows but the mapping covers {n} points")
    if len(point_features.shape) != 2:
        raise ShapeError("point features must be a 2-D array")
    if n == 0:
        raise ValidationError("cannot voxelize an empty cloud")

    unique_keys, inverse, counts = _group(mapping)
    if isinstance(point_features, Tensor):
        features = segment_mean(point_features, inverse, len(unique_keys))
    else:
        data = np.asarray(point_features, dtype=np.float64)
        total = np.zeros((len(unique_keys), data.shape[1]))
        np.add.at(total, inverse, data)
        features = total / counts[:, None]
    table = {tuple(key): i for i, key in enumerate(unique_keys.tolist())}
    return SparseVoxelGrid(
        table=table,
        features=features,
        counts=counts,
        resolution=mapping.resolution,
    )


def _lookup_rows(grid: SparseVoxelGrid, mapping: VoxelMapping) -> np.ndarray:
    table = grid.table
    rows = np.empty(len(mapping), dtype=np.int64)
    for i, key in enumerate(map(tuple, mapping.keys.tolist())):
        row = table.get(key)
        if row is None:
            raise VoxelLookupError(f"point {i} maps to voxel {key} which is not in the grid")
        rows[i] = row
    return rows


def devoxelize(grid: SparseVoxelGrid, mapping: VoxelMapping):
    """Broadcast voxel features back onto the points of a mapping.

    Every point receives the feature row of its voxel; a point whose key
    is absent from the grid raises a lookup error naming the point.
    """
    rows = _lookup_rows(grid, mapping)
    if isinstance(grid.features, Tensor):
        return gather_rows(grid.features, rows)
    return np.asarray(grid.features)[rows]


def filter_point_features_to_fov(point_features, mapping: PixelMapping):
    """Keep the rows of in-view points, in ascending point-index order.

    The result aligns row for row with image features lifted through the
    same pixel mapping.
    """
    rows = point_features.shape[0]
    if rows != len(mapping):
        raise ShapeError(
            f"features have {rows} rows but the pixel mapping covers {len(mapping)} points"
        )
    idx = np.flatnonzero(mapping.valid)
    if isinstance(point_features, Tensor):
        return gather_rows(point_features, idx)
    return np.asarray(point_features)[idx]
