"""Pin BLAS pools to one thread before numpy loads: the latency checks in
the acceptance suite assume single-threaded math, and multi-threaded BLAS on
tiny matrices only adds timing jitter."""

import os

for var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
):
    os.environ.setdefault(var, "1")
