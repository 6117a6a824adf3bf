"""Differentiable multichannel time-series augmentation and policy search."""

__version__ = "0.1.0"
