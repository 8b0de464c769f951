"""Object/background-decoupled knowledge distillation for a miniature
two-stage detector on a synthetic shapes benchmark."""

__version__ = "0.1.0"

from .data import Annotation, BBox, DatasetSpec, DetectionSample, generate_dataset, read_dataset, write_dataset
from .detector import DetectorConfig, FeatureMap, MiniDetector, Proposals
from .distill import AdaptLayer, DistillConfig
from .evaluation import Detection, ErrorBreakdown, categorize_errors, compute_map
from .masks import BinaryMask, make_gt_mask, make_random_mask
from .train import TrainConfig, TrainLog, distill_student, run_training, train_student, train_teacher

__all__ = [
    "AdaptLayer",
    "Annotation",
    "BBox",
    "BinaryMask",
    "DatasetSpec",
    "Detection",
    "DetectionSample",
    "DetectorConfig",
    "DistillConfig",
    "ErrorBreakdown",
    "FeatureMap",
    "MiniDetector",
    "Proposals",
    "TrainConfig",
    "TrainLog",
    "categorize_errors",
    "compute_map",
    "distill_student",
    "generate_dataset",
    "make_gt_mask",
    "make_random_mask",
    "read_dataset",
    "run_training",
    "train_student",
    "train_teacher",
    "write_dataset",
]
