"""Isometric residual networks built from softmax-weighted template banks."""

__version__ = "0.1.0"

from .tensor import Tape, Tensor, default_dtype, set_debug_checks, set_default_dtype

__all__ = [
    "Tensor",
    "Tape",
    "set_default_dtype",
    "default_dtype",
    "set_debug_checks",
    "__version__",
]
