"""Grouped vision/text transformer with convolutional low-rank adapters,
dynamic text-feature fusion, and a synthetic anomaly-segmentation harness."""

__version__ = "0.1.0"
