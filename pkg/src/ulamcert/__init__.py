"""Certified diffusion coefficients of expanding interval maps via Ulam's method."""

__version__ = "0.1.0"
