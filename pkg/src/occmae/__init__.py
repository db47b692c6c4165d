"""Range-aware masked occupancy pre-training for LiDAR point clouds.

A numpy implementation of a sparse 3D convolutional masked autoencoder:
synthetic LiDAR scenes, voxelisation, range-banded masking, sparse encoder,
dense occupancy decoder, focal-loss pre-training and evaluation tools.
"""
from .ablation import AblationSpec, load_ablation_spec, run_ablation
from .checkpoint import Checkpoint, export_encoder, import_encoder, load_checkpoint, save_checkpoint
from .config import RunConfig, TrainConfig, load_config
from .errors import (
    BoundsError,
    ConfigError,
    ConsistencyError,
    DataError,
    FormatError,
    IncompatibleError,
    NumericError,
    OccMAEError,
)
from .estimator import OccupancyMAE
from .loss import LossConfig, focal_loss
from .masking import MaskConfig, MaskPlan, RangeAwareMasker, apply_mask, plan_mask
from .metrics import OccMetrics, score
from .model import Schedule, build_schedule
from .nn import LayerSpec
from .pretrain import evaluate, run_training, train
from .scene import SceneSpec, generate_scene, read_points, write_points
from .voxel import GridConfig, OccupancyTarget, SparseVoxelTensor, Voxelizer, voxelize

__version__ = "0.1.0"

__all__ = [
    "AblationSpec", "BoundsError", "Checkpoint", "ConfigError", "ConsistencyError", "DataError",
    "FormatError", "GridConfig", "IncompatibleError", "LayerSpec", "LossConfig", "MaskConfig",
    "MaskPlan", "NumericError", "OccMAEError", "OccMetrics", "OccupancyMAE", "OccupancyTarget",
    "RangeAwareMasker", "RunConfig", "Schedule", "SceneSpec", "SparseVoxelTensor", "TrainConfig",
    "Voxelizer", "apply_mask", "build_schedule", "evaluate", "export_encoder", "focal_loss",
    "generate_scene", "import_encoder", "load_ablation_spec", "load_checkpoint", "load_config",
    "plan_mask", "read_points", "run_ablation", "run_training", "save_checkpoint", "score",
    "train", "voxelize", "write_points",
]
