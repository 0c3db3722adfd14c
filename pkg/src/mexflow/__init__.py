"""mexflow: normalizing-flow density estimation built on matrix exponentials."""

from .rng import Rng
from .tensor import ShapeError, Tape, Tensor

__all__ = ["Rng", "ShapeError", "Tape", "Tensor"]

__version__ = "0.1.0"
