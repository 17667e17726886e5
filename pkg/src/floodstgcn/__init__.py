"""Flood status forecasting on road networks with spatio-temporal graph convolutions."""

from .estimator import FloodForecaster, SpeedScaler, STGCNForecaster
from .exceptions import (
    ArchitectureMismatchError,
    CheckpointError,
    CheckpointVersionError,
    ConfigError,
    CorruptCheckpointError,
    DataError,
    DimensionError,
    FloodSTGCNError,
    NumericError,
    TrainingError,
    WindowTooShortError,
)
from .graph import RoadSegment, build_graph, cheb_apply, normalized_laplacian
from .metrics import EvalReport, horizon_eval, rolling_eval, status_from_speed
from .model import ModelConfig, StgcnModel
from .simulate import ScenarioConfig, generate_network, simulate
from .training import Checkpoint, TrainConfig, checkpoint_load, checkpoint_save, train

__version__ = "0.1.0"

__all__ = [
    "ArchitectureMismatchError",
    "Checkpoint",
    "CheckpointError",
    "CheckpointVersionError",
    "ConfigError",
    "CorruptCheckpointError",
    "DataError",
    "DimensionError",
    "EvalReport",
    "FloodForecaster",
    "FloodSTGCNError",
    "ModelConfig",
    "NumericError",
    "RoadSegment",
    "STGCNForecaster",
    "ScenarioConfig",
    "SpeedScaler",
    "StgcnModel",
    "TrainConfig",
    "TrainingError",
    "WindowTooShortError",
    "build_graph",
    "cheb_apply",
    "checkpoint_load",
    "checkpoint_save",
    "generate_network",
    "horizon_eval",
    "normalized_laplacian",
    "rolling_eval",
    "simulate",
    "status_from_speed",
    "train",
]
