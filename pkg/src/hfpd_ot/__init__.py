"""Hyperprior-based randomized optimal transport with fairness diagnostics."""

__version__ = "0.1.0"
