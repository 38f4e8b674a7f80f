"""Diffusion LMS with estimation and compensation of second-order sensor nonlinearity."""

__version__ = "0.1.0"
