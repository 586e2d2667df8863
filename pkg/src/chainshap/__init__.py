"""Causal Shapley attributions for county-level epidemic models."""

__version__ = "0.1.0"
