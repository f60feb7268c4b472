import os

# Single-threaded BLAS: bit-reproducible matmuls, one-core runtime budgets.
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np
import pytest

from rwkvlab import precision


@pytest.fixture
def f64():
    """Run a test in 64-bit verification precision."""
    with precision.use_precision("f64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
