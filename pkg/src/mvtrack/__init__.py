"""Multi-view multi-person tracking on a shared ground plane.

Camera views are lifted onto a ground grid, fused, encoded with multi-scale
deformable attention, and decoded into a detection heatmap plus per-track
motion offsets that drive a simple association tracker.
"""

from .errors import (
    ChecksumMismatch,
    ConfigInvalid,
    DepthNonPositive,
    FormatError,
    GraphConsumed,
    MissingFrame,
    MVTrackError,
    NaNDetected,
    PositionOutOfGrid,
    ShapeMismatch,
    ValidationError,
)
from .estimator import MultiViewTracker
from .geometry import CameraCalibration, GroundGrid, VoxelGrid
from .inference import TrackerParams, oracle_track, track_sequence
from .metrics import EvalResult, evaluate
from .model import ModelConfig, MVTrackModel
from .simulator import SceneConfig, Sequence, simulate_sequence
from .trainer import TrainConfig, train_run

__version__ = "0.1.0"

__all__ = [
    "CameraCalibration",
    "ChecksumMismatch",
    "ConfigInvalid",
    "DepthNonPositive",
    "EvalResult",
    "FormatError",
    "GraphConsumed",
    "GroundGrid",
    "MissingFrame",
    "ModelConfig",
    "MultiViewTracker",
    "MVTrackError",
    "MVTrackModel",
    "NaNDetected",
    "PositionOutOfGrid",
    "SceneConfig",
    "Sequence",
    "ShapeMismatch",
    "TrackerParams",
    "TrainConfig",
    "ValidationError",
    "VoxelGrid",
    "evaluate",
    "oracle_track",
    "simulate_sequence",
    "track_sequence",
    "train_run",
]
