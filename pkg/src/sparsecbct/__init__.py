"""Sparse-view cone-beam CT reconstruction with neural priors and residual diffusion refinement."""

import os

# the TBB layer shipped in this environment is too old for numba; avoid the warning
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"
