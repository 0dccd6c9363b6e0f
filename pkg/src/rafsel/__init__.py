"""Iterative-method selection for sparse linear systems from fused
relative (image) and absolute (numeric) matrix features."""

__version__ = "0.1.0"
