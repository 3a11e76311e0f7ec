"""Multi-task facial-attribute feature learning and fusion on a from-scratch CNN engine."""

from .errors import (AlignmentError, CheckpointError, ConfigurationError, DimensionError,
                     FacefuseError, IngestionError, LabelError, TrainingError)

__version__ = "0.1.0"

__all__ = ["AlignmentError", "CheckpointError", "ConfigurationError", "DimensionError", "FacefuseError",
           "IngestionError", "LabelError", "TrainingError", "__version__"]
