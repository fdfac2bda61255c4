"""Curvature-preconditioned training library with spectral and convergence labs."""

__version__ = "0.1.0"
