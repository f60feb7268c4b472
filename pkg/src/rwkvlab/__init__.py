"""Desk-scale lab for converting a toy GQA transformer into an RWKV-style
RNN-attention model: alignment, word-level KL distillation, context-extension
SFT, synthetic evaluations, and a file-based pipeline around them."""

import os

# Pin BLAS threading before numpy loads anywhere in this package: keeps
# matmul results bit-reproducible and honours the one-core runtime budget.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from .precision import (  # noqa: E402
    active_dtype,
    precision_mode,
    set_check_finite,
    set_precision,
    use_precision,
)
from .tensor import Graph, Tensor, backward, constant, grad_check  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "Graph",
    "Tensor",
    "active_dtype",
    "backward",
    "constant",
    "grad_check",
    "precision_mode",
    "set_check_finite",
    "set_precision",
    "use_precision",
    "__version__",
]
