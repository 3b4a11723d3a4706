"""Desk-scale differentiable volume rendering lab."""

__version__ = "0.1.0"
