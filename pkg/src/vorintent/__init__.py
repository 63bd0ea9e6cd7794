"""Warehouse worker intention estimation over generalized-Voronoi motion
validation, with a deterministic multi-robot simulator, replay tooling and
a live steering service."""

__version__ = "0.1.0"
