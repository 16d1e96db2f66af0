"""CPU Gaussian splatting toolkit for first-surface depth of transparent surfaces."""

import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"
