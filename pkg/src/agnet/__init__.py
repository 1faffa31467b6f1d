"""Attention-gated convolutional classifiers with scan-plane localization."""

from .errors import (
    AgnetError,
    CheckpointError,
    ConfigError,
    DataError,
    NumericalAbort,
    ShapeError,
)
from .tensor import (
    Tape,
    Tensor,
    backward,
    no_grad,
    recording,
    set_default_dtype,
)

__version__ = "1.0.0"

__all__ = [
    "AgnetError",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "NumericalAbort",
    "ShapeError",
    "Tape",
    "Tensor",
    "backward",
    "no_grad",
    "recording",
    "set_default_dtype",
    "__version__",
]
