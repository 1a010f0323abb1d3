"""Numerical laboratory for the query-key bilinear form of self-attention."""

__version__ = "0.1.0"
