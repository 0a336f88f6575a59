"""Weakly-supervised rDR classification with equivariant CAM regularization and feature-space attention MIL."""

__version__ = "0.1.0"
