"""Convolutional Dynamic Alignment Networks in numpy.

The networks compute an input-dependent linear map, so every logit can be
written exactly as a sum of per-pixel contributions.
"""

from .network import CodaNet, build, collapse_full, contributions, forward
from .tensor import DimensionError, GeometryError, Rng

__version__ = "0.1.0"

__all__ = [
    "CodaNet",
    "DimensionError",
    "GeometryError",
    "Rng",
    "build",
    "collapse_full",
    "contributions",
    "forward",
]
