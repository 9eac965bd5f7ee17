"""Soil-sampling site segmentation with a hierarchical transformer."""

__version__ = "0.1.0"
