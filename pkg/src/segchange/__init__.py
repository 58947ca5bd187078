"""Bitemporal change detection with text guidance and a linear-attention BEV converter."""

__version__ = "0.1.0"
