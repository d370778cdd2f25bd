"""Compositional zero-shot detection on synthetic scenes with trainable primitive tokens."""

from .compspace import CompositionSpace, SplitSpec, build_space, default_split, make_split
from .evalkit import Detection, EvalReport, nms_map
from .incrementer import IncrementPlan, TuningRegime, plan_from_confusions, run_increment
from .scenegen import DatasetSpec, build_dataset
from .tokenmodel import TokenDetector, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, evaluate_model, train

__all__ = [
    "CompositionSpace",
    "DatasetSpec",
    "Detection",
    "EvalReport",
    "IncrementPlan",
    "SplitSpec",
    "TokenDetector",
    "TrainConfig",
    "TuningRegime",
    "build_dataset",
    "build_space",
    "default_split",
    "evaluate_model",
    "load_checkpoint",
    "make_split",
    "nms_map",
    "plan_from_confusions",
    "run_increment",
    "save_checkpoint",
    "train",
]
__version__ = "0.1.0"
