"""Exception hierarchy shared by all gamair modules."""


class GamaError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(GamaError, ValueError):
    """Tensor shapes are inconsistent with an operation or configuration."""


class GeometryError(ShapeError):
    """Convolution geometry does not produce an integral output size."""


class BackwardError(GamaError, RuntimeError):
    """Reverse-mode differentiation was requested on an invalid node."""


class ConfigError(GamaError, ValueError):
    """A configuration violates one of its invariants."""


class NumericError(GamaError, ArithmeticError):
    """NaN or infinite values appeared during optimization."""


class CheckpointError(GamaError):
    """Base class for checkpoint decoding failures; ``code`` is stable."""

    code = 1


class MagicMismatchError(CheckpointError):
    code = 2


class VersionMismatchError(CheckpointError):
    code = 3


class TruncatedCheckpointError(CheckpointError):
    code = 4


class ImageError(GamaError):
    """Base class for image decoding failures."""


class UnsupportedImageError(ImageError):
    pass


class TruncatedImageError(ImageError):
    pass


class BenchmarkError(GamaError, RuntimeError):
    """A forward pass failed inside the latency harness."""

    def __init__(self, run_index: int, cause: BaseException):
        super().__init__(f"runner failed at run {run_index}: {cause!r}")
        self.run_index = run_index


class CsvFormatError(GamaError, ValueError):
    """A measurement CSV is malformed; ``line`` is 1-based (the header is line 1)."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
