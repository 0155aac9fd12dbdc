"""Neural finite-state machines for online phase recognition in procedural video."""

from .backbone import ModelConfig
from .errors import ConfigError, FormatError, NFSMError, NumericError, ShapeError
from .training import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train
from .workflow import VideoSequence, WorkflowSpec, synth7

__all__ = [
    "Checkpoint",
    "ConfigError",
    "FormatError",
    "ModelConfig",
    "NFSMError",
    "NumericError",
    "ShapeError",
    "TrainConfig",
    "VideoSequence",
    "WorkflowSpec",
    "load_checkpoint",
    "save_checkpoint",
    "synth7",
    "train",
]
__version__ = "0.1.0"
