"""Drift-robust mesh tracking through long non-rigid image sequences."""

__version__ = "0.1.0"
