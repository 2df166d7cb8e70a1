"""Desk-scale VAE-MMD domain adaptation laboratory."""

__version__ = "0.1.0"
