"""Complexity-aware adaptive image-text retrieval, desk scale."""

__version__ = "0.1.0"
