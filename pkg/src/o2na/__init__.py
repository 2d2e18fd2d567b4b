"""Desk-scale controllable non-autoregressive video captioning toolkit."""

import os

# tiny-matrix workload: threaded BLAS only adds sync overhead, and the
# latency/VPS measurements are specified as single-threaded
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from .config import RunConfig, load_config  # noqa: E402,F401
from .model import LossWeights, ModelDims, O2NAModel, full_loss  # noqa: E402,F401
from .decoding import ControlSpec, decode_o2na, npd_decode  # noqa: E402,F401

__version__ = "0.1.0"
