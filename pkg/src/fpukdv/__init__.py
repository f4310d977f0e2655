"""Numerical laboratory for the continuum and small-amplitude limits from FPU chains to KdV."""

__version__ = "0.1.0"
