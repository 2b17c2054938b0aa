"""Soft-guided adaptively-dropped residual networks."""

__version__ = "0.1.0"
