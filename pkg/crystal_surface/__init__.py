"""Metropolis crystal-surface KMC workbench."""

__version__ = "1.0.0"
