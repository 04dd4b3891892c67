"""Open-vocabulary point-cloud segmentation with image-to-point knowledge transfer.

A numpy reverse-mode tensor engine, pinhole projection and label transfer,
text-aligned image and point branches, distillation and vision-point
matching losses, a two-stage trainer, a synthetic multi-camera benchmark,
and evaluation tooling.
"""

from .config import RunConfig, StageConfig, TransferOptions, load_config
from .errors import ConfigError, ContractError, DataError, GenerationError, ShapeError, TrainingError
from .evaluation import ConfusionMatrix, MetricsReport, compute_metrics, evaluate_model, harmonic_iou, run_ablation, run_projection_baseline
from .geometry import Calibration, PointCloud, project_points, transfer_labels
from .model import CrossModalModel, infer_point_labels
from .scenegen import NoiseModel, SceneSpec, SyntheticScene, generate_scene, make_dataset
from .tensor import Tensor, backward, no_grad
from .trainer import run_two_stage
from .vocab import ClassVocabulary

__all__ = [
    "Calibration",
    "ClassVocabulary",
    "ConfigError",
    "ConfusionMatrix",
    "ContractError",
    "CrossModalModel",
    "DataError",
    "GenerationError",
    "MetricsReport",
    "NoiseModel",
    "PointCloud",
    "RunConfig",
    "SceneSpec",
    "ShapeError",
    "StageConfig",
    "SyntheticScene",
    "Tensor",
    "TrainingError",
    "TransferOptions",
    "backward",
    "compute_metrics",
    "evaluate_model",
    "generate_scene",
    "harmonic_iou",
    "infer_point_labels",
    "load_config",
    "make_dataset",
    "no_grad",
    "project_points",
    "run_ablation",
    "run_projection_baseline",
    "run_two_stage",
    "transfer_labels",
]
__version__ = "0.1.0"
