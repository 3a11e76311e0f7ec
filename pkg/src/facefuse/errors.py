"""Exception hierarchy.

Every error a user can cause by bad input derives from ``FacefuseError``;
the CLI maps those to exit status 1 and everything else to 2.
"""


class FacefuseError(Exception):
    pass


class DimensionError(FacefuseError, ValueError):
    """Tensor shapes disagree with what an operation expects."""


class ConfigurationError(FacefuseError, ValueError):
    """A hyper-parameter or architecture setting is invalid."""


class LabelError(FacefuseError, ValueError):
    pass


class IngestionError(FacefuseError):
    """A manifest line or image file could not be read."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointError(FacefuseError):
    pass


class AlignmentError(FacefuseError):
    """Feature sets being combined do not cover the same samples."""


class TrainingError(FacefuseError):
    """Training diverged (non-finite loss)."""
