"""Coarse-to-dense point cloud reconstruction from a single image, on a small numpy autodiff engine."""

__version__ = "0.1.0"
