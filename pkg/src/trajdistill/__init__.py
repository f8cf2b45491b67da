"""Trajectory forecasting with Gaussian-mixture outputs and teacher-student
distillation, on a pure-numpy tape autodiff core.

Submodules: geom, diffcore, gmm, losses, models, scenegen, metrics, train,
benchlat, cli. This package intentionally imports nothing heavy at the top
level so the command line can pin thread counts before numpy loads.
"""

__version__ = "0.1.0"
