"""Differentiable radar range-Doppler rendering and scene reconstruction."""

__version__ = "0.1.0"
