"""Recursive binary part decomposition of 3D point clouds."""

__version__ = "0.1.0"
