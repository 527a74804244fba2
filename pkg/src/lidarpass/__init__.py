"""LiDAR semantic segmentation with camera-assisted training.

The package couples a sparse voxel point branch with an image branch
through projected point-to-pixel correspondences. During training the
fused branch teaches the point branch by soft-target distillation at
every scale; at inference the point branch runs alone.
"""

from .errors import (
    ConfigError,
    FormatError,
    LidarPassError,
    ShapeError,
    ValidationError,
    VoxelLookupError,
)
from .geometry import (
    DEPTH_EPS,
    IGNORE_LABEL,
    CameraModel,
    PixelMapping,
    PointCloud,
    build_pixel_mapping,
    compose_extrinsic_chain,
    lift_image_features_to_points,
    project_labels_to_image,
    project_points,
)
from .sparsevox import (
    SparseVoxelGrid,
    VoxelMapping,
    build_voxel_mapping,
    devoxelize,
    filter_point_features_to_fov,
    voxelize,
)
from .tensor import Tensor, backward, grad_check
from .fusion import (
    FusionBlockParams,
    LossBreakdown,
    ScalePair,
    distill_loss,
    fuse,
    multiscale_kd_step,
)
from .evalmetrics import (
    ConfusionMatrix,
    DistanceBins,
    accumulate,
    combined_seg_loss,
    cross_entropy,
    distance_binned_miou,
    format_metrics_table,
    fwiou,
    lovasz_softmax,
    metrics_report,
    miou,
    overall_acc,
    per_class_iou,
    tta_vote,
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
from .dataio import (
    Scene,
    SynthConfig,
    augment_2d,
    augment_3d,
    crop_pixel_mapping,
    generate_synthetic_scene,
    load_scene,
    parse_kitti_calib,
    read_labels,
    read_point_cloud_bin,
    save_scene,
    write_labels,
    write_point_cloud_bin,
)
from .cli import RunConfig, build_dataset, eval_run, load_config, main, train_run

__version__ = "0.1.0"

__all__ = [
    "CameraModel",
    "ConfigError",
    "ConfusionMatrix",
    "DEPTH_EPS",
    "Decoder2D",
    "Decoder3D",
    "DistanceBins",
    "Encoder2D",
    "Encoder3D",
    "FormatError",
    "FusionBlockParams",
    "IGNORE_LABEL",
    "LidarPassError",
    "LossBreakdown",
    "ParamStore",
    "PixelMapping",
    "PointCloud",
    "RunConfig",
    "ScalePair",
    "Scene",
    "ShapeError",
    "SparseVoxelGrid",
    "SynthConfig",
    "Tensor",
    "ValidationError",
    "VoxelLookupError",
    "VoxelMapping",
    "accumulate",
    "augment_2d",
    "augment_3d",
    "backward",
    "build_dataset",
    "build_pixel_mapping",
    "build_voxel_mapping",
    "combined_seg_loss",
    "compose_extrinsic_chain",
    "crop_pixel_mapping",
    "cross_entropy",
    "devoxelize",
    "distance_binned_miou",
    "distill_loss",
    "eval_run",
    "filter_checkpoint_3d",
    "filter_point_features_to_fov",
    "format_metrics_table",
    "fuse",
    "fwiou",
    "generate_synthetic_scene",
    "grad_check",
    "lift_image_features_to_points",
    "load_checkpoint",
    "load_config",
    "load_scene",
    "lovasz_softmax",
    "main",
    "metrics_report",
    "miou",
    "multiscale_kd_step",
    "overall_acc",
    "parse_kitti_calib",
    "per_class_iou",
    "project_labels_to_image",
    "project_points",
    "read_labels",
    "read_point_cloud_bin",
    "save_checkpoint",
    "save_scene",
    "tta_vote",
    "train_run",
    "voxelize",
    "write_labels",
    "write_point_cloud_bin",
]
