"""GAMA-IR image restoration on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    CheckpointError,
    ConfigError,
    GamaError,
    NumericError,
    ShapeError,
)
from .network import NetworkConfig, build_network, load_checkpoint, save_checkpoint  # noqa: F401
from .tensor import Tape, Tensor, backward  # noqa: F401
