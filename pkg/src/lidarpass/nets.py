"""Tiny 2D and 3D segmentation backbones built on the autodiff core.

The 2D encoder is a stack of 3x3 convolution blocks (edge-replicated
padding, leaky relu, 2x2 mean-pool downsample); its decoder upsamples every
scale back to full resolution with nearest neighbor, projects each through
a 1x1 convolution, merges by elementwise addition and classifies. The 3D
encoder voxelizes point features at a resolution that doubles per scale and
applies a residual per-voxel MLP; its decoder gathers every scale back to
the points, concatenates and classifies.

All parameters live in a ParamStore under dotted names. Forward passes
fetch parameters through the store, which counts accesses, so tests can
assert that 3D-only inference never touches 2D weights. Checkpoints are a
flat binary container: a JSON header describing named float32 arrays,
followed by their raw little-endian values.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import FormatError, ShapeError, ValidationError
from .geometry import PointCloud
from .sparsevox import (
    SparseVoxelGrid,
    VoxelMapping,
    build_voxel_mapping,
    devoxelize,
    voxelize,
)
from .tensor import (
    Tensor,
    add,
    concat_last_dim,
    gather_rows,
    leaky_relu,
    matmul,
    reshape,
    segment_mean,
)

LEAKY_SLOPE = 0.1

CHECKPOINT_MAGIC = b"LPC1"
CHECKPOINT_VERSION = 1


class ParamStore:
    """Named parameter tensors with per-name access counting."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self.access_counts: dict[str, int] = {}

    def create(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValidationError(f"parameter {name!r} already exists")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        self.access_counts[name] = 0
        return t

    def get(self, name: str) -> Tensor:
        """Fetch a parameter for use in a forward pass (counted)."""
        self.access_counts[name] += 1
        return self._params[name]

    def names(self) -> list[str]:
        return list(self._params)

    def raw_items(self):
        """Uncounted iteration, for optimizers and serialization."""
        return self._params.items()

    def raw_get(self, name: str) -> Tensor:
        return self._params[name]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def reset_access_counts(self) -> None:
        for name in self.access_counts:
            self.access_counts[name] = 0

    def accesses_matching(self, prefixes) -> int:
        return sum(
            count
            for name, count in self.access_counts.items()
            if any(name.startswith(p) for p in prefixes)
        )

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite existing parameters with checkpoint values by name."""
        for name, value in arrays.items():
            param = self._params.get(name)
            if param is None:
                continue
            value = np.asarray(value, dtype=np.float64)
            if value.shape != param.data.shape:
                raise ValidationError(
                    f"checkpoint parameter {name!r} has shape {value.shape}, "
                    f"model expects {param.data.shape}"
                )
            param.data = value


def _init_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """A dense layer ``x @ w + b`` with fan-in uniform initialization."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, zero_init: bool = False):
        self.store = store
        self.name = name
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = _init_uniform(rng, d_in, (d_in, d_out))
        store.create(name + ".w", w)
        store.create(name + ".b", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        w = self.store.get(self.name + ".w")
        b = self.store.get(self.name + ".b")
        return add(matmul(x, w), b)


def _conv_neighbor_indices(h: int, w: int) -> np.ndarray:
    """Flat indices of the 3x3 neighborhood per pixel, edges clamped."""
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    taps = []
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            r = np.clip(rows + dr, 0, h - 1)
            c = np.clip(cols + dc, 0, w - 1)
            taps.append(r * w + c)
    return np.stack(taps, axis=-1).reshape(-1)


class Conv3x3:
    """3x3 convolution with edge-replicated padding, as an im2col matmul.

    The weight matrix has one row per (neighbor tap, input channel) pair in
    tap-major order.
    """

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 rng: np.random.Generator):
        self.c_in = c_in
        self.lin = Linear(store, name, 9 * c_in, c_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h, w, c = x.shape
        if c != self.c_in:
            raise ShapeError(f"expected {self.c_in} input channels, got {c}")
        idx = _conv_neighbor_indices(h, w)
        flat = reshape(x, (h * w, c))
        patches = reshape(gather_rows(flat, idx), (h * w, 9 * c))
        out = self.lin(patches)
        return reshape(out, (h, w, out.shape[-1]))


def mean_pool2(x: Tensor) -> Tensor:
    """2x2 mean pooling of an (H, W, C) tensor with even H and W."""
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"mean_pool2 needs even spatial dims, got {h}x{w}")
    # Group the four source pixels of every output pixel and average.
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    seg = ((rows // 2) * (w // 2) + (cols // 2)).reshape(-1)
    flat = reshape(x, (h * w, c))
    pooled = segment_mean(flat, seg, (h // 2) * (w // 2))
    return reshape(pooled, (h // 2, w // 2, c))


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor upsampling of an (H, W, C) tensor."""
    if factor < 1:
        raise ValidationError("upsample factor must be at least 1")
    h, w, c = x.shape
    if factor == 1:
        return x
    rows, cols = np.meshgrid(np.arange(h * factor), np.arange(w * factor), indexing="ij")
    idx = ((rows // factor) * w + (cols // factor)).reshape(-1)
    flat = reshape(x, (h * w, c))
    return reshape(gather_rows(flat, idx), (h * factor, w * factor, c))


@dataclass
class MultiScaleFeatures2D:
    """Per-scale feature images; scale l has spatial size (H, W) / 2**l."""

    images: list
    input_hw: tuple[int, int]

    def __post_init__(self) -> None:
        h, w = self.input_hw
        for l, img in enumerate(self.images, start=1):
            eh, ew = h // (2**l), w // (2**l)
            if img.shape[:2] != (eh, ew):
                raise ShapeError(
                    f"scale {l} image has shape {img.shape[:2]}, expected {(eh, ew)}"
                )

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class MultiScaleFeatures3D:
    """Per-scale (grid, mapping) pairs; resolution doubles each scale."""

    scales: list

    def __post_init__(self) -> None:
        for i in range(1, len(self.scales)):
            prev = self.scales[i - 1][1].resolution
            cur = self.scales[i][1].resolution
            if abs(cur - 2.0 * prev) > 1e-9 * max(1.0, cur):
                raise ValidationError(
                    f"scale {i + 1} resolution {cur} is not double of {prev}"
                )

    def __len__(self) -> int:
        return len(self.scales)


class Encoder2D:
    def __init__(self, store: ParamStore, rng: np.random.Generator, *,
                 in_channels: int = 3, width: int = 64, scales: int = 4,
                 prefix: str = "enc2d"):
        self.scales = scales
        self.convs = []
        c = in_channels
        for l in range(1, scales + 1):
            self.convs.append(Conv3x3(store, f"{prefix}.s{l}.conv", c, width, rng))
            c = width

    def __call__(self, image) -> MultiScaleFeatures2D:
        x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float64))
        if len(x.shape) != 3:
            raise ShapeError(f"image must be (H, W, C), got {x.shape}")
        h, w, _ = x.shape
        div = 2**self.scales
        if h % div or w % div:
            raise ValidationError(
                f"image size {h}x{w} must be divisible by {div} for {self.scales} scales"
            )
        feats = []
        for conv in self.convs:
            x = mean_pool2(leaky_relu(conv(x), LEAKY_SLOPE))
            feats.append(x)
        return MultiScaleFeatures2D(images=feats, input_hw=(h, w))


class Decoder2D:
    def __init__(self, store: ParamStore, rng: np.random.Generator, *,
                 width: int = 64, scales: int = 4, num_classes: int,
                 prefix: str = "dec2d"):
        self.projections = [
            Linear(store, f"{prefix}.s{l}.proj", width, width, rng)
            for l in range(1, scales + 1)
        ]
        self.classifier = Linear(store, f"{prefix}.cls", width, num_classes, rng)

    def __call__(self, features: MultiScaleFeatures2D) -> Tensor:
        h, w = features.input_hw
        merged = None
        for l, (img, proj) in enumerate(zip(features.images, self.projections), start=1):
            up = upsample_nearest(img, 2**l)
            flat = reshape(up, (h * w, up.shape[-1]))
            part = proj(flat)
            merged = part if merged is None else add(merged, part)
        logits = self.classifier(merged)
        return reshape(logits, (h, w, logits.shape[-1]))


class Encoder3D:
    """Hierarchical point-to-voxel encoder.

    A linear stem embeds raw point features, then each scale voxelizes at
    its resolution, runs a residual per-voxel MLP and hands the devoxelized
    features to the next scale. The second MLP linear starts at zero so
    every block begins as an identity.
    """

    def __init__(self, store: ParamStore, rng: np.random.Generator, *,
                 in_dim: int, width: int = 64, scales: int = 4,
                 base_resolution: float = 0.1, prefix: str = "enc3d"):
        if not base_resolution > 0:
            raise ValidationError("base_resolution must be positive")
        self.scales = scales
        self.base_resolution = base_resolution
        self.stem = Linear(store, f"{prefix}.stem", in_dim, width, rng)
        self.blocks = [
            (
                Linear(store, f"{prefix}.s{l}.lin1", width, width, rng),
                Linear(store, f"{prefix}.s{l}.lin2", width, width, rng, zero_init=True),
            )
            for l in range(1, scales + 1)
        ]

    def __call__(self, cloud: PointCloud, point_features) -> MultiScaleFeatures3D:
        if len(cloud) == 0:
            raise ValidationError("cannot encode an empty cloud")
        x = (
            point_features
            if isinstance(point_features, Tensor)
            else Tensor(np.asarray(point_features, dtype=np.float64))
        )
        if x.shape[0] != len(cloud):
            raise ShapeError("point features must have one row per point")
        x = self.stem(x)
        out = []
        for l, (lin1, lin2) in enumerate(self.blocks, start=1):
            resolution = self.base_resolution * 2.0 ** (l - 1)
            mapping = build_voxel_mapping(cloud, resolution, scale_index=l)
            grid = voxelize(x, mapping)
            h = grid.features
            h = add(h, lin2(leaky_relu(lin1(h), LEAKY_SLOPE)))
            grid = replace(grid, features=h)
            out.append((grid, mapping))
            x = devoxelize(grid, mapping)
        return MultiScaleFeatures3D(scales=out)


class Decoder3D:
    def __init__(self, store: ParamStore, rng: np.random.Generator, *,
                 width: int = 64, scales: int = 4, num_classes: int,
                 prefix: str = "dec3d"):
        self.classifier = Linear(store, f"{prefix}.cls", scales * width, num_classes, rng)

    def __call__(self, features: MultiScaleFeatures3D, num_points: int) -> Tensor:
        merged = None
        for grid, mapping in features.scales:
            part = devoxelize(grid, mapping)
            if part.shape[0] != num_points:
                raise ShapeError(
                    f"scale covers {part.shape[0]} points, expected {num_points}"
                )
            merged = part if merged is None else concat_last_dim(merged, part)
        return self.classifier(merged)


def save_checkpoint(path, store: ParamStore, meta: dict) -> None:
    """Write parameters as named float32 arrays behind a JSON header."""
    entries = []
    blobs = []
    offset = 0
    for name, param in store.raw_items():
        data = np.ascontiguousarray(param.data, dtype="<f4")
        entries.append({
            "name": name,
            "shape": list(data.shape),
            "offset": offset,
            "nbytes": data.nbytes,
        })
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = {
        "format": "lidarpass-checkpoint",
        "version": CHECKPOINT_VERSION,
        "meta": meta,
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Read a checkpoint; returns ``(arrays, meta)`` with float64 arrays."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated checkpoint header")
    (header_len,) = struct.unpack("<I", blob[4:8])
    header_end = 8 + header_len
    if len(blob) < header_end:
        raise FormatError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(blob[8:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise FormatError(f"{path}: invalid checkpoint header: {err}") from err
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(
            f"{path}: unsupported checkpoint version {header.get('version')!r}"
        )
    base = header_end
    arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(blob):
            raise FormatError(f"{path}: tensor {entry['name']!r} is truncated")
        flat = np.frombuffer(blob[start:end], dtype="<f4")
        arrays[entry["name"]] = flat.reshape(entry["shape"]).astype(np.float64)
    return arrays, header.get("meta", {})


def filter_checkpoint_3d(arrays: dict) -> dict:
    """Keep only the parameters needed for point-cloud-only inference."""
    return {
        name: value
        for name, value in arrays.items()
        if name.startswith("enc3d.") or name.startswith("dec3d.")
    }
