"""Dual-pixel defocus deblurring: simulator, network, training, evaluation."""

__version__ = "0.1.0"
