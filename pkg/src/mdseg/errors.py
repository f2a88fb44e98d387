"""Exception types shared across the package."""


class MdsegError(Exception):
    """Base class for all package errors."""


class ShapeError(MdsegError):
    """Tensor dimensions incompatible with the requested operation."""


class ConfigError(MdsegError):
    """Invalid or inconsistent configuration (strides, resolutions, counts)."""


class DataError(MdsegError):
    """Malformed input data (labels out of range, empty masks, bad files)."""


class FilesystemError(MdsegError):
    """File I/O failed; the message names the offending path."""


class TrainingError(MdsegError):
    """Training diverged or produced a non-finite loss."""

    def __init__(self, message: str, batch_index: int | None = None):
        super().__init__(message)
        self.batch_index = batch_index


class CheckpointError(MdsegError):
    """Checkpoint file is corrupt or has an unsupported layout.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
