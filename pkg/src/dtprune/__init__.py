"""Differentiable transportation pruning."""

__version__ = "0.1.0"
