"""Gradient-based model-predictive planning over recurrent state-space world models."""

__version__ = "0.1.0"
