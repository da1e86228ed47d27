"""Reduced-precision neural network inference toolkit.

Configurable binary floating point and fixed point scalar arithmetic,
robust reduction and dot product algorithms, sound error bounds, a small
graph runtime, and a sweep harness for locating the smallest precision
that preserves a model's predictions.
"""

from .rounding import RoundingMode
from .softfloat import FloatFormat, SoftFloat, round_to_precision

__all__ = [
    "RoundingMode",
    "FloatFormat",
    "SoftFloat",
    "round_to_precision",
]

__version__ = "0.1.0"
