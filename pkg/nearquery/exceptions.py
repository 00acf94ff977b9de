"""
Exception hierarchy shared by every nearquery module
"""


class NearQueryError(Exception):
    """Root of all errors raised deliberately by nearquery"""


class ShapeError(NearQueryError, ValueError):
    """Operand shapes violate a primitive's rule"""


class NonFiniteError(NearQueryError, ValueError):
    """NaN or infinite values where finite input is required"""


class ConfigError(NearQueryError, ValueError):
    """Configuration is structurally valid but semantically unusable"""


class DatasetError(NearQueryError):
    """Manifest or raster files are missing or inconsistent"""


class CheckpointError(NearQueryError):
    """Base class for checkpoint read/write failures"""


class CheckpointMagicError(CheckpointError):
    """File does not start with the checkpoint magic"""


class CheckpointTruncatedError(CheckpointError):
    """File ends before the header or a tensor blob is complete"""


class CheckpointShapeError(CheckpointError):
    """Stored tensors do not match the model they are loaded into"""


class TrainingDivergedError(NearQueryError):
    """Loss became non-finite during training"""

    def __init__(self, message: str, step: int, checkpoint_path: str = ""):
        super().__init__(message)
        self.step = step
        self.checkpoint_path = checkpoint_path
