"""Camera projection geometry and point-to-pixel correspondence.

Conventions used throughout:

* coordinates and camera matrices are float64,
* a continuous image coordinate pair is ``(u, v)`` where ``u`` indexes
  columns and ``v`` indexes rows,
* discrete pixel indices are obtained with a true floor (rounding toward
  negative infinity), so negative coordinates never alias into the image,
* a point is usable only if its camera-frame depth exceeds ``DEPTH_EPS``.

All functions here are pure and keep no module state, so they are safe to
call concurrently from several threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError
from .tensor import Tensor, gather_rows, reshape

DEPTH_EPS = 1e-6

# Reserved label written into pixels no point projects onto.
IGNORE_LABEL = 255

# Pixel indices are clipped to this magnitude before the int cast so that
# garbage coordinates of behind-camera points cannot overflow int64.
_PIXEL_CLIP = 2.0**40


def _as_matrix(value, shape, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != shape:
        raise ShapeError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


def _check_rigid(transform: np.ndarray, name: str) -> None:
    if not np.array_equal(transform[3], [0.0, 0.0, 0.0, 1.0]):
        raise ValidationError(f"{name} last row must be exactly [0, 0, 0, 1]")
    rot = transform[:3, :3]
    err = np.abs(rot.T @ rot - np.eye(3)).max()
    if err >= 1e-6:
        raise ValidationError(
            f"{name} rotation block is not orthonormal (max deviation {err:.3e})"
        )


@dataclass
class CameraModel:
    """A pinhole camera with its pose relative to the point cloud frame.

    ``intrinsic`` is the 3x4 projection matrix K and ``extrinsic`` the 4x4
    rigid transform T taking cloud-frame points into the camera frame, so a
    homogeneous point projects as ``K @ T @ [x, y, z, 1]``.
    """

    intrinsic: np.ndarray
    extrinsic: np.ndarray
    image_height: int
    image_width: int

    def __post_init__(self) -> None:
        self.intrinsic = _as_matrix(self.intrinsic, (3, 4), "intrinsic")
        self.extrinsic = _as_matrix(self.extrinsic, (4, 4), "extrinsic")
        _check_rigid(self.extrinsic, "extrinsic")
        if self.image_height < 1 or self.image_width < 1:
            raise ValidationError("image dimensions must be at least 1x1")


@dataclass
class PointCloud:
    """N points in a common sensor frame, with optional intensities."""

    coords: np.ndarray
    intensity: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ShapeError(f"coords must be (N, 3), got {self.coords.shape}")
        if not np.all(np.isfinite(self.coords)):
            raise ValidationError("coords contain non-finite values")
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.float64)
            if self.intensity.shape != (len(self.coords),):
                raise ShapeError(
                    "intensity length must match the number of points"
                )

    def __len__(self) -> int:
        return self.coords.shape[0]


@dataclass
class PixelMapping:
    """Per-point discrete pixel assignment for one camera.

    ``rows``/``cols`` hold floor(v)/floor(u) for every point; only entries
    with ``valid`` set are meaningful and those are guaranteed in-bounds
    with positive depth.
    """

    rows: np.ndarray
    cols: np.ndarray
    depth: np.ndarray
    valid: np.ndarray
    num_valid: int = field(default=-1)

    def __post_init__(self) -> None:
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        n = self.rows.shape[0]
        for name, arr in (("cols", self.cols), ("depth", self.depth), ("valid", self.valid)):
            if arr.shape != (n,):
                raise ShapeError(f"{name} must have shape ({n},), got {arr.shape}")
        count = int(np.count_nonzero(self.valid))
        if self.num_valid == -1:
            self.num_valid = count
        elif self.num_valid != count:
            raise ValidationError(
                f"num_valid={self.num_valid} disagrees with valid mask count {count}"
            )
        if np.any(self.depth[self.valid] <= 0.0):
            raise ValidationError("valid points must have positive depth")

    def __len__(self) -> int:
        return self.rows.shape[0]


def project_points(cloud: PointCloud, camera: CameraModel):
    """Project a cloud through a camera.

    Returns ``(uv, depth, in_front)`` where ``uv`` is the continuous (u, v)
    image position of every point, ``depth`` the camera-frame z before the
    perspective divide, and ``in_front`` flags points with depth above
    ``DEPTH_EPS``. Coordinates of behind-camera points are unspecified but
    always finite.
    """
    coords = cloud.coords
    hom = np.concatenate([coords, np.ones((len(cloud), 1))], axis=1)
    proj = hom @ (camera.intrinsic @ camera.extrinsic).T
    depth = proj[:, 2]
    in_front = depth > DEPTH_EPS
    safe = np.where(in_front, depth, 1.0)
    uv = proj[:, :2] / safe[:, None]
    return uv, depth, in_front


def compose_extrinsic_chain(transforms) -> np.ndarray:
    """Compose a sequence of rigid 4x4 transforms into one.

    The transforms are applied right to left, matching matrix product
    order: the first element of ``transforms`` is applied last. An empty
    sequence composes to the identity.
    """
    result = np.eye(4)
    for i, item in enumerate(transforms):
        t = _as_matrix(item, (4, 4), f"transform {i}")
        _check_rigid(t, f"transform {i}")
        result = result @ t
    return result


def build_pixel_mapping(uv, depth, in_front, image_height: int, image_width: int) -> PixelMapping:
    """Discretize continuous projections into a per-point pixel mapping.

    A point is valid when it lies in front of the camera and its floored
    pixel indices fall inside ``[0, H) x [0, W)``.
    """
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    in_front = np.asarray(in_front, dtype=bool)
    if uv.ndim != 2 or uv.shape[1] != 2:
        raise ShapeError(f"uv must be (N, 2), got {uv.shape}")
    n = uv.shape[0]
    if depth.shape != (n,) or in_front.shape != (n,):
        raise ShapeError("depth and in_front must match the number of points")
    if image_height < 1 or image_width < 1:
        raise ValidationError("image dimensions must be at least 1x1")

    cols = np.clip(np.floor(uv[:, 0]), -_PIXEL_CLIP, _PIXEL_CLIP).astype(np.int64)
    rows = np.clip(np.floor(uv[:, 1]), -_PIXEL_CLIP, _PIXEL_CLIP).astype(np.int64)
    valid = (
        in_front
        & (rows >= 0)
        & (rows < image_height)
        & (cols >= 0)
        & (cols < image_width)
    )
    return PixelMapping(rows=rows, cols=cols, depth=depth, valid=valid)


def project_labels_to_image(labels, mapping: PixelMapping, image_height: int, image_width: int) -> np.ndarray:
    """Rasterize per-point labels into a label image.

    Pixels hit by several points keep the label of the nearest one, with
    ties broken by the smallest point index. Unhit pixels are set to the
    reserved ignore value 255, so 255 is rejected as an input label.
    """
    labels = np.asarray(labels)
    if labels.shape != (len(mapping),):
        raise ShapeError("labels length must match the mapping")
    if labels.size and int(labels.max()) >= IGNORE_LABEL:
        raise ValidationError(f"labels must be below the reserved value {IGNORE_LABEL}")
    if labels.size and int(labels.min()) < 0:
        raise ValidationError("labels must be non-negative")

    image = np.full((image_height, image_width), IGNORE_LABEL, dtype=np.int64)
    idx = np.flatnonzero(mapping.valid)
    if idx.size == 0:
        return image
    flat = mapping.rows[idx] * image_width + mapping.cols[idx]
    # Stable sort by (pixel, depth, point index); the first entry of each
    # pixel group is the winner.
    order = np.lexsort((idx, mapping.depth[idx], flat))
    flat_sorted = flat[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    winners = idx[order[first]]
    image.reshape(-1)[flat_sorted[first]] = labels[winners]
    return image


def lift_image_features_to_points(feature_image, mapping: PixelMapping):
    """Gather per-pixel features for every valid point.

    ``feature_image`` is an (H, W, D) array or autodiff tensor; the result
    holds one row per valid point, in ascending point-index order. With a
    tensor input the gather participates in gradient propagation.
    """
    shape = feature_image.shape
    if len(shape) != 3:
        raise ShapeError(f"feature image must be (H, W, D), got {shape}")
    h, w, d = shape
    idx = np.flatnonzero(mapping.valid)
    rows = mapping.rows[idx]
    cols = mapping.cols[idx]
    if idx.size and (rows.max() >= h or cols.max() >= w):
        raise ShapeError(
            f"mapping addresses pixels outside a {h}x{w} feature image"
        )
    flat_idx = rows * w + cols
    if isinstance(feature_image, Tensor):
        flat = reshape(feature_image, (h * w, d))
        return gather_rows(flat, flat_idx)
    arr = np.asarray(feature_image)
    return arr.reshape(h * w, d)[flat_idx]
