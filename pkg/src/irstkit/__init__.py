"""Desk-scale differentiable toolkit for lightweight infrared small-target detection."""

import os

# single-threaded BLAS: the work units here are too small to amortize
# thread sync, and one worker keeps reductions deterministic; override by
# exporting the variables before import
for _v in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_v, "1")

from . import blocks, complexity, data, detector, metrics, tensor
from .tensor import Tensor4, backward, grad_check

__all__ = [
    "Tensor4",
    "backward",
    "grad_check",
    "tensor",
    "blocks",
    "detector",
    "metrics",
    "complexity",
    "data",
]

__version__ = "0.1.0"
