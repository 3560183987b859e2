"""Sparse mixture-of-experts routing with rectification, inside a three-stage
aspect-based sentiment pipeline for Persian reviews."""

__version__ = "0.1.0"
