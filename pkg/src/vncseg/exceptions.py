"""Custom exceptions for the vncseg pipeline."""

from __future__ import annotations


class VncSegError(Exception):
    """Base exception for all vncseg errors."""

    default_code = "error"

    def __init__(self, message: str, code: str | None = None) -> None:
        """Initialize VncSegError.

        Args:
            message: Error message describing what went wrong.
            code: Short machine-readable category. Defaults to the class code.
        """
        super().__init__(message)
        self.message = message
        self.code = code or self.default_code

    def __str__(self) -> str:
        """Return string representation of the error."""
        return f"[{self.code}] {self.message}"


class FormatError(VncSegError):
    """Raised when an on-disk header or manifest is malformed."""

    default_code = "format"

    def __init__(self, message: str = "Malformed file") -> None:
        """Initialize FormatError.

        Args:
            message: Error message.
        """
        super().__init__(message)


class MissingFileError(VncSegError):
    """Raised when a required file does not exist."""

    default_code = "missing"

    def __init__(self, message: str = "File not found", path: str | None = None) -> None:
        """Initialize MissingFileError.

        Args:
            message: Error message.
            path: Path that was looked up.
        """
        super().__init__(message)
        self.path = path


class SizeMismatchError(VncSegError):
    """Raised when a binary blob length disagrees with its header."""

    default_code = "size"

    def __init__(
        self,
        message: str = "Blob size mismatch",
        expected: int | None = None,
        actual: int | None = None,
    ) -> None:
        """Initialize SizeMismatchError.

        Args:
            message: Error message.
            expected: Expected number of bytes.
            actual: Number of bytes found.
        """
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class GeometryError(VncSegError):
    """Raised when volume geometry is invalid or two geometries disagree."""

    default_code = "geometry"

    def __init__(self, message: str = "Invalid volume geometry") -> None:
        """Initialize GeometryError.

        Args:
            message: Error message.
        """
        super().__init__(message)


class ShapeError(VncSegError):
    """Raised when tensor shapes or channel counts do not match."""

    default_code = "shape"

    def __init__(self, message: str = "Tensor shape mismatch") -> None:
        """Initialize ShapeError.

        Args:
            message: Error message.
        """
        super().__init__(message)


class ValidationError(VncSegError):
    """Raised when parameters are out of their valid range."""

    default_code = "validation"

    def __init__(self, message: str = "Invalid parameters") -> None:
        """Initialize ValidationError.

        Args:
            message: Error message.
        """
        super().__init__(message)


class ConfigError(VncSegError):
    """Raised when a configuration mapping has unknown or missing keys."""

    default_code = "config"

    def __init__(self, message: str = "Invalid configuration") -> None:
        """Initialize ConfigError.

        Args:
            message: Error message.
        """
        super().__init__(message)


class TrainingError(VncSegError):
    """Raised when training diverges."""

    default_code = "training"

    def __init__(self, message: str = "Training failed", iteration: int | None = None) -> None:
        """Initialize TrainingError.

        Args:
            message: Error message.
            iteration: Iteration at which training stopped.
        """
        super().__init__(message)
        self.iteration = iteration


class CheckpointError(VncSegError):
    """Raised when no usable checkpoint is available."""

    default_code = "checkpoint"

    def __init__(self, message: str = "No checkpoints found") -> None:
        """Initialize CheckpointError.

        Args:
            message: Error message.
        """
        super().__init__(message)


class StorageError(VncSegError):
    """Raised when reading or writing a file fails at the operating-system level."""

    default_code = "io"

    def __init__(self, message: str = "I/O failure", path: str | None = None) -> None:
        """Initialize StorageError.

        Args:
            message: Error message.
            path: File or directory involved, when known.
        """
        super().__init__(message)
        self.path = path
