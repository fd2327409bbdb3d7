"""Model assembly, training, inference, checkpoints and configuration."""

from .checkpoint import Checkpoint, load_checkpoint, load_encoder, save_checkpoint, save_encoder
from .config import Config, ConfigError
from .model import AvsModel, ModelOutput
from .train import Prediction, TrainingDiverged, TrainResult, evaluate, format_log_line, heatmap_hits, infer, train

__all__ = [
    "AvsModel",
    "Checkpoint",
    "Config",
    "ConfigError",
    "ModelOutput",
    "Prediction",
    "TrainResult",
    "TrainingDiverged",
    "evaluate",
    "format_log_line",
    "heatmap_hits",
    "infer",
    "load_checkpoint",
    "load_encoder",
    "save_checkpoint",
    "save_encoder",
    "train",
]
