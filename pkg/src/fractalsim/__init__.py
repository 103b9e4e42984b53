"""Deterministic desk-scale simulator of a self-scaling service control plane."""

__version__ = "0.1.0"
