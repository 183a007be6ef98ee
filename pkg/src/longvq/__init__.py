"""Linear-time gated state-space attention with vector-quantized keys.

The package provides the layer and its exact quadratic oracle, a small
reverse-mode autodiff substrate on numpy, EMA codebook quantization,
training utilities for desk-scale tasks, and a scaling benchmark.
"""

from .tensor import (
    Tensor, NumericsError, set_precision, get_dtype, precision, no_grad,
    param, grad, finite_diff,
)
from .rng import Rng

__version__ = "0.1.0"
