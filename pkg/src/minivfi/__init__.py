"""Desk-scale toolkit for pruning and distilling a multi-branch frame interpolator."""

__version__ = "0.1.0"
