"""Differentiable partitioning-tree forests and a segmentation-mask codec."""

__version__ = "0.1.0"
