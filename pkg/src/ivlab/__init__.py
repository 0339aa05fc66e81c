"""Invariance-constrained linear prediction across environments."""

__version__ = "0.1.0"
