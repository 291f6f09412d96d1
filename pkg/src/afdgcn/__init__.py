"""Adaptive-graph convolutional GRU with attention fusion for multi-step
traffic forecasting, built on a self-contained float64 autodiff engine."""

import os

# the workload is many small gemms; BLAS thread fan-out costs more than it
# buys, so default to one thread unless the user already chose
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"

from .model import AFDGCN, ModelConfig
from .tensor import Tensor
from .training import TrainConfig, train

__all__ = ["AFDGCN", "ModelConfig", "Tensor", "TrainConfig", "train", "__version__"]
