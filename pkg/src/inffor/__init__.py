"""Influence-based detection and mitigation of targeted training-set attacks.

Small numpy networks with exact per-example gradients, checkpointed training,
static and dynamic influence estimators (with gradient renormalization),
robust anomaly scoring, target identification and target-driven sanitization.
"""

from .errors import (CheckpointFormatError, ConfigError, DegenerateScaleError, DimensionError, InfforError,
                     NumericalError)
from .fit import identify_targets
from .influence import GAS, GAS_L, EstimatorConfig, LissaConfig, batch_influence
from .mitigation import MitigationConfig, mitigate
from .nn import ModelSpec
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CheckpointFormatError", "ConfigError", "DegenerateScaleError", "DimensionError", "EstimatorConfig", "GAS",
    "GAS_L", "InfforError", "LissaConfig", "MitigationConfig", "ModelSpec", "NumericalError", "TrainConfig",
    "batch_influence", "identify_targets", "mitigate", "train",
]
