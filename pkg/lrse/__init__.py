"""Calibration-driven low-rank compression of Transformer speech encoders."""

__version__ = "0.1"
