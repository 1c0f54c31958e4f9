"""Dual-scaffold surface reconstruction engine.

Anchored 2D Gaussian surfels are optimized jointly with a sparse voxel
SDF; the two scaffolds regularize each other through explicit band-gated
anchor management and an implicit surface-pull loss.
"""

__version__ = "0.1.0"

from .scene_io import Camera, Dataset, Frame, TriMesh  # noqa: F401
