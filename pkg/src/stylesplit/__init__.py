"""Disentangled style transfer on synthetic text, with decomposition metrics."""

__version__ = "0.1.0"
