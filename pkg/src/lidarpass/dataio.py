"""File formats, augmentations and the synthetic scene generator.

Point clouds use the packed binary layout of automotive scans: one
little-endian float32 quadruple (x, y, z, intensity) per point. Label
files hold one little-endian uint32 per point whose low 16 bits carry the
semantic class. Calibration text has one ``KEY: v0 v1 ... v11`` line per
matrix; ``P2`` is the 3x4 camera intrinsic and ``Tr`` the sensor-to-camera
transform, stored as a 3x4 block that extends to 4x4 with [0, 0, 0, 1].

Synthetic scenes place points uniformly in a box in front of a rotated,
offset camera. The class of a point is mostly a fixed rule of its
position (a ground band by height, diagonal bands above it), but a
configurable share of points is reassigned to a random other class; the
image shows each in-view point's actual class color at its exact pixel,
so the reassigned classes can be read from the image and from nowhere
else.
The camera focal length is chosen per scene so that the requested share of
points lands inside the image, and the exact pixel assignment used for
rendering is stored with the scene as correspondence ground truth.

Every stochastic routine takes an explicit numpy Generator; nothing here
keeps random state of its own.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError, ValidationError
from .geometry import (
    DEPTH_EPS,
    IGNORE_LABEL,
    CameraModel,
    PixelMapping,
    PointCloud,
)

__all__ = [
    "Augment2DResult",
    "Scene",
    "SynthConfig",
    "augment_2d",
    "augment_3d",
    "class_palette",
    "crop_pixel_mapping",
    "format_kitti_calib",
    "generate_synthetic_scene",
    "load_scene",
    "parse_kitti_calib",
    "read_labels",
    "read_point_cloud_bin",
    "save_scene",
    "write_labels",
    "write_point_cloud_bin",
]

_POINT_RECORD_BYTES = 16
_LABEL_RECORD_BYTES = 4


def read_point_cloud_bin(data: bytes) -> PointCloud:
    """Decode packed (x, y, z, intensity) float32 records."""
    if len(data) % _POINT_RECORD_BYTES:
        raise FormatError(
            f"point cloud blob has {len(data)} bytes, not a multiple of {_POINT_RECORD_BYTES}"
        )
    records = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    if not np.all(np.isfinite(records[:, :3])):
        raise FormatError("point cloud blob contains non-finite coordinates")
    return PointCloud(
        coords=records[:, :3].astype(np.float64),
        intensity=records[:, 3].astype(np.float64),
    )


def write_point_cloud_bin(cloud: PointCloud) -> bytes:
    records = np.zeros((len(cloud), 4), dtype="<f4")
    records[:, :3] = cloud.coords
    if cloud.intensity is not None:
        records[:, 3] = cloud.intensity
    return records.tobytes()


def read_labels(data: bytes) -> np.ndarray:
    """Decode per-point semantic classes from the low 16 bits of each word."""
    if len(data) % _LABEL_RECORD_BYTES:
        raise FormatError(
            f"label blob has {len(data)} bytes, not a multiple of {_LABEL_RECORD_BYTES}"
        )
    words = np.frombuffer(data, dtype="<u4")
    return (words & 0xFFFF).astype(np.int64)


def write_labels(labels, instance_ids=None) -> bytes:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
        raise ValidationError("labels must fit in 16 bits")
    words = labels.astype(np.uint32)
    if instance_ids is not None:
        inst = np.asarray(instance_ids, dtype=np.uint32)
        if inst.shape != labels.shape:
            raise ShapeError("instance ids must align with labels")
        words = words | (inst << np.uint32(16))
    return words.astype("<u4").tobytes()


def _parse_calib_line(line: str, lineno: int) -> tuple[str, np.ndarray]:
    key, _, rest = line.partition(":")
    if not _:
        raise FormatError(f"calibration line {lineno} has no 'KEY:' prefix: {line!r}")
    try:
        values = np.array([float(tok) for tok in rest.split()], dtype=np.float64)
    except ValueError as err:
        raise FormatError(f"calibration line {lineno} ({key.strip()!r}): {err}") from err
    if values.size != 12:
        raise FormatError(
            f"calibration line {lineno} ({key.strip()!r}) has {values.size} values, expected 12"
        )
    return key.strip(), values.reshape(3, 4)


def parse_kitti_calib(text: str):
    """Extract the camera intrinsic and the sensor-to-camera transform.

    Returns ``(K, T)`` where K is the ``P2`` 3x4 matrix and T the ``Tr``
    line extended to a rigid 4x4. Unknown keys are ignored.
    """
    matrices = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        key, mat = _parse_calib_line(line, lineno)
        matrices[key] = mat
    for required in ("P2", "Tr"):
        if required not in matrices:
            raise FormatError(f"calibration is missing the {required!r} line")
    extrinsic = np.eye(4)
    extrinsic[:3, :] = matrices["Tr"]
    return matrices["P2"], extrinsic


def format_kitti_calib(intrinsic, extrinsic) -> str:
    intrinsic = np.asarray(intrinsic, dtype=np.float64)
    extrinsic = np.asarray(extrinsic, dtype=np.float64)
    if intrinsic.shape != (3, 4) or extrinsic.shape != (4, 4):
        raise ShapeError("expected a 3x4 intrinsic and a 4x4 extrinsic")
    lines = [
        "P2: " + " ".join(repr(float(v)) for v in intrinsic.reshape(-1)),
        "Tr: " + " ".join(repr(float(v)) for v in extrinsic[:3].reshape(-1)),
    ]
    return "\n".join(lines) + "\n"


def augment_3d(cloud: PointCloud, labels, rng):
    """Random global scale then rotation about the z axis.

    The scale is uniform in [0.95, 1.05] and acts on the horizontal plane
    only, so heights survive exactly; the angle is uniform in [0, 2*pi).
    Point order, intensities and labels are untouched.
    """
    scale = rng.uniform(0.95, 1.05)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    coords = cloud.coords.copy()
    coords[:, :2] *= scale
    coords = coords @ rot.T
    return PointCloud(coords, cloud.intensity), np.asarray(labels)


@dataclass
class Augment2DResult:
    """A cropped, optionally flipped, color-jittered image pair.

    The crop offsets, flip decision and the per-channel jitter scales are
    recorded so correspondence mappings can be carried along.
    """

    image: np.ndarray
    labels: np.ndarray
    row0: int
    col0: int
    flipped: bool
    jitter: np.ndarray


def augment_2d(image, label_image, rng, crop_hw=(320, 480)) -> Augment2DResult:
    """Random crop, horizontal flip and per-channel brightness jitter.

    The same crop window and flip are applied to the label image; the
    jitter scales each channel by a uniform [0.8, 1.2] factor and clamps
    the result back into [0, 1].
    """
    image = np.asarray(image, dtype=np.float64)
    label_image = np.asarray(label_image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"image must be (H, W, 3), got {image.shape}")
    if label_image.shape != image.shape[:2]:
        raise ShapeError("label image must match the image spatially")
    crop_h, crop_w = int(crop_hw[0]), int(crop_hw[1])
    h, w = image.shape[:2]
    if h < crop_h or w < crop_w:
        raise ValidationError(
            f"image {h}x{w} is smaller than the {crop_h}x{crop_w} crop"
        )
    row0 = int(rng.integers(0, h - crop_h + 1))
    col0 = int(rng.integers(0, w - crop_w + 1))
    flipped = bool(rng.random() < 0.5)
    jitter = rng.uniform(0.8, 1.2, size=3)

    img = image[row0:row0 + crop_h, col0:col0 + crop_w]
    lab = label_image[row0:row0 + crop_h, col0:col0 + crop_w]
    if flipped:
        img = img[:, ::-1]
        lab = lab[:, ::-1]
    img = np.clip(img * jitter, 0.0, 1.0)
    return Augment2DResult(
        image=img, labels=np.ascontiguousarray(lab),
        row0=row0, col0=col0, flipped=flipped, jitter=jitter,
    )


def crop_pixel_mapping(mapping: PixelMapping, row0: int, col0: int,
                       crop_h: int, crop_w: int, flipped: bool = False) -> PixelMapping:
    """Re-express a pixel mapping in the coordinates of a crop window."""
    rows = mapping.rows - row0
    cols = mapping.cols - col0
    if flipped:
        cols = crop_w - 1 - cols
    valid = (
        mapping.valid
        & (rows >= 0) & (rows < crop_h)
        & (cols >= 0) & (cols < crop_w)
    )
    return PixelMapping(rows=rows, cols=cols, depth=mapping.depth, valid=valid)


@dataclass
class Scene:
    """One paired sample: a labeled cloud plus camera images.

    ``gt_mappings`` holds the generator's exact point-to-pixel assignment
    per camera when the scene is synthetic.
    """

    cloud: PointCloud
    labels: np.ndarray
    cameras: list
    images: list
    gt_mappings: list | None = None

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (len(self.cloud),):
            raise ShapeError("labels must have one entry per point")
        if len(self.cameras) != len(self.images):
            raise ShapeError("need exactly one image per camera")


@dataclass
class SynthConfig:
    """Knobs of the synthetic scene generator."""

    seed: int
    num_points: int = 1000
    num_classes: int = 3
    box_extent: float = 16.0
    camera_fov_fraction: float = 1.0
    image_height: int = 64
    image_width: int = 64
    cue_fraction: float = 0.08

    def __post_init__(self) -> None:
        if self.num_points < 1:
            raise ValidationError("num_points must be at least 1")
        if self.num_classes < 2 or self.num_classes > IGNORE_LABEL - 1:
            raise ValidationError("num_classes must be in [2, 254]")
        if self.num_points < self.num_classes:
            raise ValidationError("num_points must be at least num_classes")
        if not self.box_extent > 0:
            raise ValidationError("box_extent must be positive")
        if not 0.0 < self.camera_fov_fraction <= 1.0:
            raise ValidationError("camera_fov_fraction must be in (0, 1]")
        if round(self.camera_fov_fraction * self.num_points) < 1:
            raise ValidationError(
                "camera_fov_fraction leaves no point in view for this num_points"
            )
        if self.image_height < 2 or self.image_width < 2:
            raise ValidationError("image must be at least 2x2")
        if not 0.0 <= self.cue_fraction < 1.0:
            raise ValidationError("cue_fraction must be in [0, 1)")


# Camera pose used by every synthetic scene: z looks along world x, with a
# small fixed offset so the translation path is exercised too.
_SYNTH_ROTATION = np.array([
    [0.0, -1.0, 0.0],
    [0.0, 0.0, -1.0],
    [1.0, 0.0, 0.0],
])
_SYNTH_OFFSET = np.array([0.04, -0.03, 0.10])


def class_palette(num_classes: int) -> np.ndarray:
    """A fixed, saturated color per class; class 0 is gray."""
    base = np.array([
        [0.5, 0.5, 0.5],
        [0.9, 0.1, 0.1],
        [0.1, 0.3, 0.9],
        [0.1, 0.8, 0.2],
        [0.9, 0.8, 0.1],
        [0.8, 0.1, 0.8],
        [0.1, 0.8, 0.8],
        [0.9, 0.5, 0.1],
    ])
    if num_classes <= len(base):
        return base[:num_classes].copy()
    extra = num_classes - len(base)
    hues = 2.0 * np.pi * np.arange(extra) / extra
    more = 0.5 + 0.45 * np.stack(
        [np.cos(hues), np.cos(hues + 2.0), np.cos(hues + 4.0)], axis=1
    )
    return np.concatenate([base, more], axis=0)


def _synth_classes(coords: np.ndarray, num_classes: int, box_extent: float,
                   rng, cue_fraction: float) -> np.ndarray:
    """Position rule plus a per-point cue visible only as image color.

    Points below a height threshold form class 0; the rest split into
    three diagonal bands by (x + y), cycling through the remaining
    classes. A cue_fraction share of the banded points is then reassigned
    to a different non-ground class at random. Those points keep no trace
    of their class in the coordinates; only the rendered color shows it.
    """
    labels = np.zeros(len(coords), dtype=np.int64)
    above = coords[:, 2] >= -box_extent / 8.0
    spread = (coords[:, 0] + coords[:, 1]) / (2.0 * box_extent)
    cells = np.clip((spread * 3.0).astype(np.int64), 0, 2)
    labels[above] = 1 + (cells[above] % (num_classes - 1))
    if cue_fraction > 0.0 and num_classes >= 3:
        cue = above & (rng.random(len(coords)) < cue_fraction)
        hops = rng.integers(1, num_classes - 1, size=int(cue.sum()))
        labels[cue] = 1 + (labels[cue] - 1 + hops) % (num_classes - 1)
    return labels


def _pick_focal(ratio_u: np.ndarray, ratio_v: np.ndarray, cfg: SynthConfig) -> float:
    """Focal length that puts exactly round(fraction * N) points in view.

    A point is visible iff the focal is below its personal cap, so picking
    a value between the n-th and (n+1)-th largest caps fixes the count.
    """
    half_w = cfg.image_width / 2.0
    half_h = cfg.image_height / 2.0
    with np.errstate(divide="ignore"):
        caps = np.minimum(
            half_w / np.abs(ratio_u),
            half_h / np.abs(ratio_v),
        )
    wanted = int(round(cfg.camera_fov_fraction * cfg.num_points))
    ordered = np.sort(caps)[::-1]
    if wanted >= len(ordered):
        lowest = ordered[-1]
        return float(lowest * (1.0 - 1e-9)) if np.isfinite(lowest) else float(half_w)
    focal = 0.5 * (ordered[wanted - 1] + ordered[wanted])
    if not np.isfinite(focal) or focal <= 0:
        raise ValidationError("could not place the camera for this fov fraction")
    return float(focal)


def generate_synthetic_scene(cfg: SynthConfig) -> Scene:
    """Build a fully labeled scene with exact correspondence ground truth."""
    rng = np.random.default_rng(cfg.seed)
    extent = cfg.box_extent
    low = np.array([0.5 * extent, -0.5 * extent, -0.25 * extent])
    high = np.array([1.5 * extent, 0.5 * extent, 0.25 * extent])
    # Snap to float32 so the packed binary round trip is lossless.
    coords = rng.uniform(low, high, size=(cfg.num_points, 3))
    coords = coords.astype(np.float32).astype(np.float64)
    labels = _synth_classes(coords, cfg.num_classes, extent, rng, cfg.cue_fraction)

    cam_pts = coords @ _SYNTH_ROTATION.T + _SYNTH_OFFSET
    depth = cam_pts[:, 2]
    ratio_u = cam_pts[:, 0] / depth
    ratio_v = cam_pts[:, 1] / depth
    focal = _pick_focal(ratio_u, ratio_v, cfg)
    cx = cfg.image_width / 2.0
    cy = cfg.image_height / 2.0

    u = focal * ratio_u + cx
    v = focal * ratio_v + cy
    cols = np.floor(u).astype(np.int64)
    rows = np.floor(v).astype(np.int64)
    valid = (
        (depth > DEPTH_EPS)
        & (rows >= 0) & (rows < cfg.image_height)
        & (cols >= 0) & (cols < cfg.image_width)
    )
    wanted = int(round(cfg.camera_fov_fraction * cfg.num_points))
    if int(valid.sum()) != wanted:
        raise ValidationError(
            f"focal search landed on {int(valid.sum())} visible points, wanted {wanted}"
        )
    mapping = PixelMapping(rows=rows, cols=cols, depth=depth, valid=valid)

    palette = class_palette(cfg.num_classes)
    image = np.zeros((cfg.image_height, cfg.image_width, 3))
    idx = np.flatnonzero(valid)
    if idx.size:
        flat = rows[idx] * cfg.image_width + cols[idx]
        order = np.lexsort((idx, depth[idx], flat))
        flat_sorted = flat[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = flat_sorted[1:] != flat_sorted[:-1]
        winners = idx[order[first]]
        image.reshape(-1, 3)[flat_sorted[first]] = palette[labels[winners]]

    intrinsic = np.zeros((3, 4))
    intrinsic[0, 0] = focal
    intrinsic[1, 1] = focal
    intrinsic[0, 2] = cx
    intrinsic[1, 2] = cy
    intrinsic[2, 2] = 1.0
    extrinsic = np.eye(4)
    extrinsic[:3, :3] = _SYNTH_ROTATION
    extrinsic[:3, 3] = _SYNTH_OFFSET
    camera = CameraModel(
        intrinsic=intrinsic,
        extrinsic=extrinsic,
        image_height=cfg.image_height,
        image_width=cfg.image_width,
    )
    return Scene(
        cloud=PointCloud(coords),
        labels=labels,
        cameras=[camera],
        images=[image],
        gt_mappings=[mapping],
    )


_SIDECAR_NAME = "scene.json"


def save_scene(scene: Scene, directory) -> None:
    """Write a scene as packed cloud, labels, calibration and image files.

    A JSON sidecar records image shapes and the exact ground-truth pixel
    mapping. Only single-camera scenes are serialized.
    """
    if len(scene.cameras) != 1:
        raise ValidationError("scene serialization supports exactly one camera")
    os.makedirs(directory, exist_ok=True)
    camera = scene.cameras[0]
    with open(os.path.join(directory, "points.bin"), "wb") as fh:
        fh.write(write_point_cloud_bin(scene.cloud))
    with open(os.path.join(directory, "labels.label"), "wb") as fh:
        fh.write(write_labels(scene.labels))
    with open(os.path.join(directory, "calib.txt"), "w") as fh:
        fh.write(format_kitti_calib(camera.intrinsic, camera.extrinsic))
    np.save(os.path.join(directory, "image_0.npy"), scene.images[0])

    sidecar = {
        "format": "lidarpass-scene",
        "version": 1,
        "num_points": len(scene.cloud),
        "has_intensity": scene.cloud.intensity is not None,
        "image_height": camera.image_height,
        "image_width": camera.image_width,
        "gt_mapping": None,
    }
    if scene.gt_mappings is not None:
        m = scene.gt_mappings[0]
        sidecar["gt_mapping"] = {
            "rows": m.rows.tolist(),
            "cols": m.cols.tolist(),
            "depth": m.depth.tolist(),
            "valid": m.valid.astype(int).tolist(),
        }
    with open(os.path.join(directory, _SIDECAR_NAME), "w") as fh:
        json.dump(sidecar, fh, sort_keys=True)
        fh.write("\n")


def _require_file(directory, name: str) -> str:
    path = os.path.join(directory, name)
    if not os.path.exists(path):
        raise FormatError(f"scene directory is missing {path}")
    return path


def load_scene(directory) -> Scene:
    """Read back a scene written by :func:`save_scene`."""
    with open(_require_file(directory, _SIDECAR_NAME)) as fh:
        try:
            sidecar = json.load(fh)
        except json.JSONDecodeError as err:
            raise FormatError(f"{directory}: invalid scene sidecar: {err}") from err
    if sidecar.get("format") != "lidarpass-scene" or sidecar.get("version") != 1:
        raise FormatError(f"{directory}: unsupported scene sidecar")

    with open(_require_file(directory, "points.bin"), "rb") as fh:
        cloud = read_point_cloud_bin(fh.read())
    if not sidecar["has_intensity"]:
        cloud = PointCloud(cloud.coords, None)
    with open(_require_file(directory, "labels.label"), "rb") as fh:
        labels = read_labels(fh.read())
    with open(_require_file(directory, "calib.txt")) as fh:
        intrinsic, extrinsic = parse_kitti_calib(fh.read())
    image = np.load(_require_file(directory, "image_0.npy"))
    camera = CameraModel(
        intrinsic=intrinsic,
        extrinsic=extrinsic,
        image_height=int(sidecar["image_height"]),
        image_width=int(sidecar["image_width"]),
    )
    gt_mappings = None
    raw = sidecar.get("gt_mapping")
    if raw is not None:
        gt_mappings = [PixelMapping(
            rows=np.array(raw["rows"], dtype=np.int64),
            cols=np.array(raw["cols"], dtype=np.int64),
            depth=np.array(raw["depth"], dtype=np.float64),
            valid=np.array(raw["valid"], dtype=bool),
        )]
    return Scene(
        cloud=cloud,
        labels=labels,
        cameras=[camera],
        images=[image],
        gt_mappings=gt_mappings,
    )
