"""Class-incremental semantic segmentation testbed with drift-compensated
prototype replay."""

from .config import DataConfig, ModelConfig, TrainConfig, component_flags
from .data import Scene, StepSample, TaskSchedule, build_schedule, generate_scene
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    GenerationError,
    IncsegError,
    TrainingDivergedError,
)
from .losses import LossBundle
from .metrics import StepMetrics, evaluate
from .model import ModelSnapshot, SegNet, load_checkpoint, save_checkpoint, snapshot
from .prototypes import PrototypeRecord, PrototypeStore
from .train import run_ablation, run_comparison, run_experiment

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "DataConfig",
    "GenerationError",
    "IncsegError",
    "LossBundle",
    "ModelConfig",
    "ModelSnapshot",
    "PrototypeRecord",
    "PrototypeStore",
    "Scene",
    "SegNet",
    "StepMetrics",
    "StepSample",
    "TaskSchedule",
    "TrainConfig",
    "TrainingDivergedError",
    "build_schedule",
    "component_flags",
    "evaluate",
    "generate_scene",
    "load_checkpoint",
    "run_ablation",
    "run_comparison",
    "run_experiment",
    "save_checkpoint",
    "snapshot",
    "__version__",
]
