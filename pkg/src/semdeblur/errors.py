"""Exception types shared across the package."""


class EmptyInput(ValueError):
    """Raised when an operation receives an empty caption or corpus."""


class ShapeError(ValueError):
    """Raised when tensor/image shapes do not match an operation's contract."""


class LabelError(ValueError):
    """Raised when a category or token id is outside its vocabulary range."""


class ManifestError(ValueError):
    """Raised when a dataset manifest is malformed or references missing data."""


class CheckpointError(RuntimeError):
    """Raised when a checkpoint file is missing, corrupt, or incompatible."""


class DataError(ValueError):
    """Raised when a training split is unusable (e.g. empty)."""


class NonFiniteLoss(RuntimeError):
    """Raised when training encounters a NaN/Inf loss.

    Carries the path of the last good checkpoint, if one was written.
    """

    def __init__(self, message: str, last_good_checkpoint=None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint
