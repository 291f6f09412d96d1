import os

# pin BLAS threads before numpy loads anywhere (small-matrix workload)
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import pytest

from afdgcn import tensor


@pytest.fixture(autouse=True)
def checked_ops():
    """NaN/Inf rejection at op boundaries is on for every test; the training
    loop switches it off internally for its hot path."""
    tensor.set_checked(True)
    tensor.reset_tape()
    yield
    tensor.set_checked(False)
    tensor.reset_tape()
