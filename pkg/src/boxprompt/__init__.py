"""Box-supervised prompt learning for frozen promptable segmentation models."""

__version__ = "0.1.0"
