"""Meshless Fragile Points solver for 2D flexoelectric solids."""

__version__ = "0.1.0"
