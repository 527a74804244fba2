"""Command line entry points: project, synth, train and eval.

The run configuration is a flat JSON document; every field has a default
and unknown or ill-typed fields are reported together before the process
exits with code 3. Input and file-format problems exit with 2, anything
unexpected with 1. The environment variable ``LIDARPASS_SEED`` overrides
the configured seed.

Training emits one JSON object per optimization step on stdout and into
``train_log.jsonl``; evaluation writes a metrics report as JSON, an
aligned text table, CSV files and rendered figures.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from .dataio import (
    Scene,
    SynthConfig,
    augment_2d,
    augment_3d,
    crop_pixel_mapping,
    generate_synthetic_scene,
    load_scene,
    save_scene,
)
from .errors import ConfigError, FormatError, LidarPassError, ValidationError
from .evalmetrics import (
    ConfusionMatrix,
    DistanceBins,
    accumulate,
    combined_seg_loss,
    metrics_report,
    format_metrics_table,
    miou,
    tta_vote,
)
from .fusion import FusionBlockParams, LossBreakdown, multiscale_kd_step
from .geometry import (
    PointCloud,
    build_pixel_mapping,
    project_labels_to_image,
    project_points,
)
from .nets import (
    Decoder2D,
    Decoder3D,
    Encoder2D,
    Encoder3D,
    ParamStore,
    filter_checkpoint_3d,
    load_checkpoint,
    save_checkpoint,
)
from .plots import (
    save_distance_miou_figure,
    save_loss_curves_figure,
    save_per_class_iou_figure,
)
from .tensor import add, backward, reshape, scale

SEED_ENV_VAR = "LIDARPASS_SEED"

MODES = ("baseline", "2dpass")


@dataclass
class RunConfig:
    """Flat run configuration with reference defaults.

    The pipeline defaults (four scales, 0.1 m base voxels, width 64, a
    1:0.05 segmentation-to-distillation weight ratio, 480x320 crops and
    12-angle voting) follow the reference training recipe.
    """

    scales: int = 4
    base_voxel_size: float = 0.1
    hidden_dim: int = 64
    kd_weight: float = 0.05
    crop_width: int = 480
    crop_height: int = 320
    tta_angles: int = 12

    seed: int = 0
    epochs: int = 2
    batch: int = 1
    learning_rate: float = 0.1
    momentum: float = 0.9
    lovasz_weight: float = 1.0
    coord_scale: float = 0.1
    augment: bool = False
    num_classes: int = 3

    data_kind: str = "synthetic"
    data_dir: str | None = None
    num_scenes: int = 8
    val_scenes: int = 2
    points_per_scene: int = 1000
    box_extent: float = 16.0
    fov_fraction: float = 0.5
    cue_fraction: float = 0.08
    image_size: int = 64

    def validate(self) -> None:
        problems = []

        def positive_int(name, minimum=1):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
                problems.append(f"{name} must be an integer >= {minimum}, got {value!r}")

        def positive_float(name):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
                problems.append(f"{name} must be a positive number, got {value!r}")

        def non_negative_float(name):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or value < 0:
                problems.append(f"{name} must be a non-negative number, got {value!r}")

        for name in ("scales", "hidden_dim", "tta_angles", "batch",
                     "num_scenes", "points_per_scene", "image_size",
                     "crop_width", "crop_height"):
            positive_int(name)
        positive_int("num_classes", minimum=2)
        positive_int("val_scenes", minimum=0)
        # epochs may be zero: training then just writes the initial state
        positive_int("epochs", minimum=0)
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            problems.append(f"seed must be an integer, got {self.seed!r}")
        elif not 0 <= self.seed < 2**63:
            problems.append(f"seed must fit in 63 bits, got {self.seed!r}")
        for name in ("base_voxel_size", "learning_rate", "coord_scale", "box_extent"):
            positive_float(name)
        for name in ("kd_weight", "lovasz_weight"):
            non_negative_float(name)
        if isinstance(self.momentum, bool) or not isinstance(self.momentum, (int, float)) or not 0.0 <= self.momentum < 1.0:
            problems.append(f"momentum must be in [0, 1), got {self.momentum!r}")
        if not isinstance(self.augment, bool):
            problems.append(f"augment must be a boolean, got {self.augment!r}")
        if self.data_kind not in ("synthetic", "dir"):
            problems.append(f"data_kind must be 'synthetic' or 'dir', got {self.data_kind!r}")
        if self.data_kind == "dir" and not self.data_dir:
            problems.append("data_dir is required when data_kind is 'dir'")
        if isinstance(self.fov_fraction, (int, float)) and not isinstance(self.fov_fraction, bool):
            if not 0.0 < self.fov_fraction <= 1.0:
                problems.append(f"fov_fraction must be in (0, 1], got {self.fov_fraction!r}")
        else:
            problems.append(f"fov_fraction must be a number, got {self.fov_fraction!r}")
        if isinstance(self.cue_fraction, (int, float)) and not isinstance(self.cue_fraction, bool):
            if not 0.0 <= self.cue_fraction < 1.0:
                problems.append(f"cue_fraction must be in [0, 1), got {self.cue_fraction!r}")
        else:
            problems.append(f"cue_fraction must be a number, got {self.cue_fraction!r}")
        if isinstance(self.scales, int) and not isinstance(self.scales, bool) and self.scales >= 1:
            div = 2**self.scales
            for name in ("image_size", "crop_width", "crop_height"):
                value = getattr(self, name)
                if isinstance(value, int) and not isinstance(value, bool) and value >= 1 and value % div:
                    problems.append(
                        f"{name}={value} must be divisible by 2**scales = {div}"
                    )
        if problems:
            raise ConfigError("\n".join(problems))


def load_config(path) -> RunConfig:
    """Read, override and validate a flat JSON config document."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from err
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return make_config(raw)


def make_config(raw: dict) -> RunConfig:
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(
            "\n".join(f"unknown config field {name!r}" for name in unknown)
        )
    cfg = RunConfig(**raw)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError:
            raise ConfigError(
                f"{SEED_ENV_VAR}={env_seed!r} is not an integer seed"
            ) from None
    cfg.validate()
    return cfg


def derive_seed(*parts) -> int:
    """Fold integers into one well-mixed 63-bit seed, reproducibly."""
    state = np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)
    return int(state[0] >> np.uint64(1))


def build_dataset(cfg: RunConfig):
    """Materialize the train and validation scene lists."""
    if cfg.data_kind == "synthetic":
        def make(split_id: int, index: int) -> Scene:
            return generate_synthetic_scene(SynthConfig(
                seed=derive_seed(cfg.seed, split_id, index),
                num_points=cfg.points_per_scene,
                num_classes=cfg.num_classes,
                box_extent=cfg.box_extent,
                camera_fov_fraction=cfg.fov_fraction,
                cue_fraction=cfg.cue_fraction,
                image_height=cfg.image_size,
                image_width=cfg.image_size,
            ))

        train = [make(1, i) for i in range(cfg.num_scenes)]
        val = [make(2, i) for i in range(cfg.val_scenes)]
        return train, val

    base = cfg.data_dir
    if not os.path.isdir(base):
        raise FormatError(f"data_dir does not exist: {base}")

    def load_split(name: str):
        split_dir = os.path.join(base, name)
        if not os.path.isdir(split_dir):
            raise FormatError(f"data_dir is missing the {name!r} split: {split_dir}")
        scenes = []
        for entry in sorted(os.listdir(split_dir)):
            full = os.path.join(split_dir, entry)
            if os.path.isdir(full):
                scenes.append(load_scene(full))
        if not scenes:
            raise FormatError(f"no scenes found under {split_dir}")
        return scenes

    return load_split("train"), load_split("val")


def point_features(cloud: PointCloud, coord_scale: float) -> np.ndarray:
    """Raw per-point input features: scaled coordinates plus intensity."""
    feats = cloud.coords * coord_scale
    if cloud.intensity is not None:
        feats = np.concatenate([feats, cloud.intensity[:, None]], axis=1)
    return feats


@dataclass
class ModelBundle:
    store: ParamStore
    enc3d: Encoder3D
    dec3d: Decoder3D
    enc2d: Encoder2D | None
    dec2d: Decoder2D | None
    fusion: list | None
    meta: dict


def build_model(cfg: RunConfig, in_dim: int, mode: str) -> ModelBundle:
    """Assemble the model for a mode; the point branch is built first so
    its initialization matches between modes at equal seeds."""
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
    store = ParamStore()
    rng = np.random.default_rng(derive_seed(cfg.seed, 0))
    enc3d = Encoder3D(
        store, rng, in_dim=in_dim, width=cfg.hidden_dim, scales=cfg.scales,
        base_resolution=cfg.base_voxel_size,
    )
    dec3d = Decoder3D(
        store, rng, width=cfg.hidden_dim, scales=cfg.scales,
        num_classes=cfg.num_classes,
    )
    enc2d = dec2d = fusion = None
    if mode == "2dpass":
        enc2d = Encoder2D(store, rng, in_channels=3, width=cfg.hidden_dim, scales=cfg.scales)
        dec2d = Decoder2D(store, rng, width=cfg.hidden_dim, scales=cfg.scales,
                          num_classes=cfg.num_classes)
        fusion = [
            FusionBlockParams(
                store, rng, feat_dim=cfg.hidden_dim, hidden=cfg.hidden_dim,
                num_classes=cfg.num_classes, prefix=f"fuse.s{l}",
            )
            for l in range(1, cfg.scales + 1)
        ]
    meta = {
        "mode": mode,
        "scales": cfg.scales,
        "hidden_dim": cfg.hidden_dim,
        "base_voxel_size": cfg.base_voxel_size,
        "num_classes": cfg.num_classes,
        "in_dim": in_dim,
        "coord_scale": cfg.coord_scale,
    }
    return ModelBundle(store, enc3d, dec3d, enc2d, dec2d, fusion, meta)


def build_model_from_meta(meta: dict, seed: int = 0) -> ModelBundle:
    cfg = RunConfig(
        scales=int(meta["scales"]),
        base_voxel_size=float(meta["base_voxel_size"]),
        hidden_dim=int(meta["hidden_dim"]),
        num_classes=int(meta["num_classes"]),
        coord_scale=float(meta["coord_scale"]),
        seed=seed,
        image_size=2 ** int(meta["scales"]),
        crop_width=2 ** int(meta["scales"]),
        crop_height=2 ** int(meta["scales"]),
    )
    return build_model(cfg, int(meta["in_dim"]), meta["mode"])


class SGD:
    """Plain stochastic gradient descent with classical momentum."""

    def __init__(self, store: ParamStore, learning_rate: float, momentum: float):
        self.store = store
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.data) for name, p in store.raw_items()}

    def step(self) -> None:
        for name, param in self.store.raw_items():
            if param.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += param.grad
            param.data = param.data - self.learning_rate * v

    def zero_grad(self) -> None:
        self.store.zero_grad()


def training_step(bundle: ModelBundle, scene: Scene, cfg: RunConfig,
                  mode: str, rng: np.random.Generator) -> LossBreakdown:
    """Forward one scene and assemble its loss breakdown."""
    cloud, labels = scene.cloud, scene.labels
    camera, image = scene.cameras[0], scene.images[0]
    uv, depth, in_front = project_points(cloud, camera)
    mapping = build_pixel_mapping(
        uv, depth, in_front, camera.image_height, camera.image_width
    )

    enc_cloud = cloud
    if cfg.augment:
        enc_cloud, _ = augment_3d(cloud, labels, rng)
    feats = point_features(enc_cloud, cfg.coord_scale)
    feats3d = bundle.enc3d(enc_cloud, feats)
    logits3d = bundle.dec3d(feats3d, len(cloud))
    seg3d = combined_seg_loss(logits3d, labels, lovasz_weight=cfg.lovasz_weight)
    if mode == "baseline":
        return LossBreakdown(seg3d=seg3d, seg2d=None, total=seg3d)

    height, width = camera.image_height, camera.image_width
    label_image = project_labels_to_image(labels, mapping, height, width)
    img, label_img, mapping2d = image, label_image, mapping
    if cfg.augment:
        crop_h = min(cfg.crop_height, height)
        crop_w = min(cfg.crop_width, width)
        aug = augment_2d(image, label_image, rng, crop_hw=(crop_h, crop_w))
        img, label_img = aug.image, aug.labels
        mapping2d = crop_pixel_mapping(
            mapping, aug.row0, aug.col0, crop_h, crop_w, aug.flipped
        )

    feats2d = bundle.enc2d(img)
    logits2d = bundle.dec2d(feats2d)
    h, w, c = logits2d.shape
    seg2d = combined_seg_loss(
        reshape(logits2d, (h * w, c)), label_img.reshape(-1),
        lovasz_weight=cfg.lovasz_weight,
    )
    return multiscale_kd_step(
        feats2d, feats3d, mapping2d, bundle.fusion, labels,
        seg3d=seg3d, seg2d=seg2d, kd_weight=cfg.kd_weight,
    )


def _mean_scalars(tensors):
    total = None
    for t in tensors:
        total = t if total is None else add(total, t)
    return scale(total, 1.0 / len(tensors))


def _merge_breakdowns(parts: list) -> LossBreakdown:
    if len(parts) == 1:
        return parts[0]
    merged = LossBreakdown(
        seg3d=_mean_scalars([p.seg3d for p in parts]),
        seg2d=None if parts[0].seg2d is None else _mean_scalars([p.seg2d for p in parts]),
        seg_fuse=[_mean_scalars(ts) for ts in zip(*[p.seg_fuse for p in parts])],
        seg_scale3d=[_mean_scalars(ts) for ts in zip(*[p.seg_scale3d for p in parts])],
        kd=[_mean_scalars(ts) for ts in zip(*[p.kd for p in parts])],
    )
    merged.total = _mean_scalars([p.total for p in parts])
    return merged


@dataclass
class TrainResult:
    bundle: ModelBundle
    records: list
    train_scenes: list
    val_scenes: list


def train_run(cfg: RunConfig, mode: str, log_stream=None) -> TrainResult:
    """Train a model; returns the bundle, per-step records and the data."""
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
    train_scenes, val_scenes = build_dataset(cfg)
    if not train_scenes:
        raise ValidationError("the training split is empty")
    in_dim = point_features(train_scenes[0].cloud, cfg.coord_scale).shape[1]
    bundle = build_model(cfg, in_dim, mode)
    optimizer = SGD(bundle.store, cfg.learning_rate, cfg.momentum)
    records = []
    step = 0
    for epoch in range(cfg.epochs):
        for start in range(0, len(train_scenes), cfg.batch):
            group = train_scenes[start:start + cfg.batch]
            parts = []
            for offset, scene in enumerate(group):
                rng = np.random.default_rng(derive_seed(cfg.seed, 3, epoch, start + offset))
                parts.append(training_step(bundle, scene, cfg, mode, rng))
            breakdown = _merge_breakdowns(parts)
            backward(breakdown.total)
            optimizer.step()
            optimizer.zero_grad()
            record = breakdown.to_record(step)
            records.append(record)
            if log_stream is not None:
                log_stream.write(json.dumps(record, sort_keys=True) + "\n")
            step += 1
    return TrainResult(bundle, records, train_scenes, val_scenes)


def make_infer_fn(bundle: ModelBundle, meta: dict):
    """Point-cloud-only inference closure returning (N, C) logits."""
    def infer(cloud: PointCloud) -> np.ndarray:
        feats = point_features(cloud, float(meta["coord_scale"]))
        feats3d = bundle.enc3d(cloud, feats)
        return bundle.dec3d(feats3d, len(cloud)).data

    return infer


def evaluate_predictions(scenes, predictions, num_classes: int,
                         bins: DistanceBins | None = None):
    """Aggregate confusion and distance-binned confusion over scenes."""
    if bins is None:
        bins = DistanceBins()
    cm = ConfusionMatrix(num_classes)
    bin_cms = [ConfusionMatrix(num_classes) for _ in range(bins.num_bins)]
    for scene, preds in zip(scenes, predictions):
        cm = accumulate(cm, preds, scene.labels)
        which = bins.assign(np.linalg.norm(scene.cloud.coords, axis=1))
        for b in range(bins.num_bins):
            sel = which == b
            bin_cms[b] = accumulate(bin_cms[b], preds[sel], scene.labels[sel])
    bins_result = [
        {
            "lo": bins.edges[b],
            "hi": bins.edges[b + 1],
            "miou": miou(bin_cms[b]),
            "populated": not bin_cms[b].empty,
            "cm": bin_cms[b],
        }
        for b in range(bins.num_bins)
    ]
    return cm, bins_result


def eval_run(cfg: RunConfig, checkpoint_path, tta: bool = False):
    """Evaluate a checkpoint on the validation split, point cloud only.

    Returns ``(report, predictions)``. Image and fusion parameters are
    never read; their access counters are checked after inference.
    """
    arrays, meta = load_checkpoint(checkpoint_path)
    if int(meta["num_classes"]) != cfg.num_classes:
        raise ValidationError(
            f"checkpoint has {meta['num_classes']} classes, config expects {cfg.num_classes}"
        )
    bundle = build_model_from_meta(meta, seed=cfg.seed)
    bundle.store.load_arrays(arrays)
    bundle.store.reset_access_counts()

    _, val_scenes = build_dataset(cfg)
    if not val_scenes:
        raise ValidationError("the validation split is empty")
    infer = make_infer_fn(bundle, meta)
    predictions = []
    for scene in val_scenes:
        if tta:
            scores = tta_vote(infer, scene.cloud, angles=cfg.tta_angles)
            preds = np.argmax(scores, axis=1)
        else:
            preds = np.argmax(infer(scene.cloud), axis=1)
        predictions.append(preds.astype(np.int64))

    off_branch = bundle.store.accesses_matching(("enc2d.", "dec2d.", "fuse."))
    if off_branch:
        raise LidarPassError(
            f"evaluation touched {off_branch} image/fusion parameters"
        )
    cm, bins_result = evaluate_predictions(val_scenes, predictions, cfg.num_classes)
    report = metrics_report(cm, bins_result)
    report["num_points"] = cm.total
    report["tta_angles"] = cfg.tta_angles if tta else 1
    report["fusion_2d_param_accesses"] = off_branch
    return report, predictions


def _write_eval_outputs(report: dict, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    table = format_metrics_table(report)
    with open(os.path.join(out_dir, "metrics.txt"), "w") as fh:
        fh.write(table)
    with open(os.path.join(out_dir, "per_class_iou.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "iou"])
        for i, value in enumerate(report["per_class_iou"]):
            writer.writerow([i, "" if value is None else repr(value)])
    with open(os.path.join(out_dir, "distance_bins.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lo", "hi", "miou", "populated"])
        for entry in report["distance_bins"]:
            writer.writerow([
                repr(entry["lo"]), repr(entry["hi"]),
                repr(entry["miou"]), int(entry["populated"]),
            ])
    save_per_class_iou_figure(
        report["per_class_iou"], os.path.join(out_dir, "per_class_iou.png")
    )
    save_distance_miou_figure(
        report["distance_bins"], os.path.join(out_dir, "distance_miou.png")
    )


def _write_train_outputs(result: TrainResult, cfg: RunConfig, mode: str,
                         out_dir, export_3d_only: bool) -> str:
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "train_log.jsonl")
    with open(log_path, "w") as fh:
        for record in result.records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "losses.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "seg3d", "seg2d", "seg_fuse_sum", "kd_sum", "total"])
        for r in result.records:
            writer.writerow([
                r["step"],
                repr(r["seg3d"]),
                "" if r["seg2d"] is None else repr(r["seg2d"]),
                repr(sum(r["seg_fuse"])) if r["seg_fuse"] else "",
                repr(sum(r["kd"])) if r["kd"] else "",
                repr(r["total"]),
            ])
    if result.records:
        save_loss_curves_figure(result.records, os.path.join(out_dir, "losses.png"))

    ckpt_path = os.path.join(out_dir, "checkpoint.lpck")
    store = result.bundle.store
    meta = dict(result.bundle.meta)
    if export_3d_only:
        full = {name: p.data for name, p in store.raw_items()}
        kept = filter_checkpoint_3d(full)
        slim = ParamStore()
        for name, value in kept.items():
            slim.create(name, value)
        meta["mode"] = "baseline"
        save_checkpoint(ckpt_path, slim, meta)
    else:
        save_checkpoint(ckpt_path, store, meta)
    return ckpt_path


def cmd_project(args) -> int:
    scene = load_scene(args.scene)
    if not 0 <= args.camera < len(scene.cameras):
        raise ValidationError(
            f"camera {args.camera} does not exist; scene has {len(scene.cameras)}"
        )
    camera = scene.cameras[args.camera]
    uv, depth, in_front = project_points(scene.cloud, camera)
    mapping = build_pixel_mapping(
        uv, depth, in_front, camera.image_height, camera.image_width
    )
    n = len(scene.cloud)
    overlap = mapping.num_valid / n if n else 0.0
    print(f"points {n}")
    print(f"in_fov {mapping.num_valid}")
    print(f"overlap {overlap:.6f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "x", "y", "z", "row", "col", "depth", "valid"])
            for i in range(n):
                writer.writerow([
                    i,
                    repr(float(scene.cloud.coords[i, 0])),
                    repr(float(scene.cloud.coords[i, 1])),
                    repr(float(scene.cloud.coords[i, 2])),
                    int(mapping.rows[i]),
                    int(mapping.cols[i]),
                    repr(float(mapping.depth[i])),
                    int(mapping.valid[i]),
                ])
    return 0


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    for split_id, (name, count) in enumerate(
        (("train", cfg.num_scenes), ("val", cfg.val_scenes)), start=1
    ):
        for i in range(count):
            scene = generate_synthetic_scene(SynthConfig(
                seed=derive_seed(cfg.seed, split_id, i),
                num_points=cfg.points_per_scene,
                num_classes=cfg.num_classes,
                box_extent=cfg.box_extent,
                camera_fov_fraction=cfg.fov_fraction,
                cue_fraction=cfg.cue_fraction,
                image_height=cfg.image_size,
                image_width=cfg.image_size,
            ))
            save_scene(scene, os.path.join(args.out, name, f"scene_{i:04d}"))
    print(f"wrote {cfg.num_scenes} train and {cfg.val_scenes} val scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    result = train_run(cfg, args.mode, log_stream=sys.stdout)
    ckpt_path = _write_train_outputs(result, cfg, args.mode, args.out, args.export_3d_only)
    print(f"checkpoint {ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    report, _ = eval_run(cfg, args.checkpoint, tta=args.tta)
    _write_eval_outputs(report, args.out)
    sys.stdout.write(format_metrics_table(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lidarpass",
        description="Point cloud semantic segmentation with camera-assisted training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("project", help="summarize point-to-pixel correspondence for a scene")
    p.add_argument("scene", help="scene directory")
    p.add_argument("--camera", type=int, default=0, help="camera index (default 0)")
    p.add_argument("--csv", default=None, help="write the per-point table to this file")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("synth", help="generate a synthetic scene dataset")
    p.add_argument("--config", required=True, help="path to the JSON run config")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True, help="path to the JSON run config")
    p.add_argument(
        "--mode", choices=MODES, default="2dpass",
        help="'baseline' trains the point branch alone; '2dpass' adds the "
        "camera branch with per-scale fusion and distillation (default)",
    )
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument(
        "--export-3d-only", action="store_true",
        help="strip camera and fusion weights from the saved checkpoint",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, point cloud only")
    p.add_argument("checkpoint", help="checkpoint file")
    p.add_argument("--config", required=True, help="path to the JSON run config")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--tta", action="store_true",
                   help="average softmax scores over tta_angles rotations")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error:\n{err}", file=sys.stderr)
        return 3
    except (FormatError, FileNotFoundError) as err:
        print(f"input error: {err}", file=sys.stderr)
        return 2
    except LidarPassError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
