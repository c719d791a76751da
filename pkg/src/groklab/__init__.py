"""Delayed generalization on modular arithmetic: training, spectral, landscape, curvature and ID analyses."""

__version__ = "0.1.0"
