"""Loss-function robustness benchmark for small U-Net segmentation models."""

__version__ = "0.1.0"
