"""stackmap: interval-based segmentation of section stacks with 3D morphometry."""

__version__ = "0.1.0"
