"""Nested dropout for convolutional networks, on a small numpy CNN stack."""

__version__ = "0.1.0"
