"""Tilt-series simulation and joint field/noise-model reconstruction.

Submodules are imported on demand so the command-line entry point can
pin BLAS thread counts before numpy loads.
"""

__version__ = "0.1.0"
