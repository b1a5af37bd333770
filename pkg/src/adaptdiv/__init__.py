"""Adaptive divergences for tuning black-box stochastic simulators."""

__version__ = "0.1.0"
