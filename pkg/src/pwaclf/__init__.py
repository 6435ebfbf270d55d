"""Piecewise affine control Lyapunov functions on configuration-constrained templates."""

__version__ = "0.1.0"
