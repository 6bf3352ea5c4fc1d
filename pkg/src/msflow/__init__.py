"""Multi-scale flow matching for point cloud generation."""

from .estimator import BalancedDownsampler, MultiScaleFlowMatching
from .exceptions import CloudFormatError, PSDViolationError, TrainingDivergedError, TrajectoryDivergedError
from .geometry import build_hierarchy, downsample, farthest_point_sample, upsample_replicate
from .inference import SamplerConfig, generate
from .metrics import chamfer, emd, evaluate, one_nna
from .model import Architecture, VelocityField, init_model, load_checkpoint, save_checkpoint
from .schedule import StageSchedule, new_schedule
from .training import TrainConfig, train_stage

__version__ = "0.1.0"

__all__ = [
    "Architecture",
    "BalancedDownsampler",
    "CloudFormatError",
    "MultiScaleFlowMatching",
    "PSDViolationError",
    "SamplerConfig",
    "StageSchedule",
    "TrainConfig",
    "TrainingDivergedError",
    "TrajectoryDivergedError",
    "VelocityField",
    "build_hierarchy",
    "chamfer",
    "downsample",
    "emd",
    "evaluate",
    "farthest_point_sample",
    "generate",
    "init_model",
    "load_checkpoint",
    "new_schedule",
    "one_nna",
    "save_checkpoint",
    "train_stage",
    "upsample_replicate",
]
